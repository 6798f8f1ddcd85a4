//! Empathy mechanism classification with rationale extraction.
//!
//! A bi-encoder transformer reads a (seeker post, response post) pair and predicts, for one
//! communication mechanism, a level in {0, 1, 2} together with the response tokens that
//! justify it. Around the model sit the metrics, templated writing feedback and platform
//! log analytics.
//!
//! Numeric code is generic over [`Scalar`] (`f32`, `f64`); metrics additionally accept
//! exact rationals. The aliases below fix the common choices.

pub mod analytics;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod feedback;
pub mod fixtures;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod text;
pub mod train;

pub use encoder::{EncoderConfig, EncoderParams, Mode};
pub use error::{Error, Result};
pub use feedback::{generate_feedback, score_delta, total_score, FeedbackReport, FeedbackTemplateSet};
pub use labels::{Level, Levels, Mechanism, Span};
pub use metrics::{evaluate, MetricReport};
pub use model::{BiEncoderModel, LossWeights, ModelFlags, Prediction};
pub use pipeline::{Annotator, Pipeline};
pub use scalar::{MetricValue, Scalar};
pub use tensor::Tensor;
pub use text::{AnnotatedPair, TokenizedPair, Vocabulary};
pub use train::{MlmConfig, TrainConfig};

/// Exact rational used by the metric oracles.
pub type Exact = num_rational::Ratio<i64>;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type BiEncoder32 = BiEncoderModel<f32>;
pub type BiEncoder64 = BiEncoderModel<f64>;
pub type Pipeline32 = Pipeline<f32>;
