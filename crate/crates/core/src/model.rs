//! The bi-encoder: seeker and response encoders, fusion attention with a residual
//! connection, the identification head and the rationale head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::encoder::{encode_graph, linear, EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::labels::{Level, Mechanism, Span};
use crate::params::{join, Linear, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::encode::{mask_to_spans, RationaleTarget, TokenizedPair};

/// Architecture switches for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlags {
    /// Fuse seeker context into the response through attention.
    pub use_attention: bool,
    /// Encode the seeker post at all.
    pub use_seeker: bool,
    /// Train the rationale head.
    pub use_rationales: bool,
}

impl Default for ModelFlags {
    fn default() -> Self {
        Self {
            use_attention: true,
            use_seeker: true,
            use_rationales: true,
        }
    }
}

/// Weights of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub identification: f64,
    pub rationale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            identification: 1.0,
            rationale: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiEncoderModel<T> {
    pub mechanism: Mechanism,
    pub flags: ModelFlags,
    pub seeker_encoder: EncoderParams<T>,
    pub response_encoder: EncoderParams<T>,
    /// `d→3`, or `2d→3` when the seeker is used without attention.
    pub identification_head: Linear<T>,
    /// `d→2` per response token.
    pub rationale_head: Linear<T>,
}

/// Fusion attention output for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput<T> {
    /// `n×m` attention weights of response tokens over seeker tokens.
    pub weights: Tensor<T>,
    /// `n×d` attended seeker context.
    pub attended: Tensor<T>,
    /// `n×d` residual `e_R + a`.
    pub hidden: Tensor<T>,
}

pub struct FusionGraph {
    pub weights: Var,
    pub attended: Var,
    pub hidden: Var,
}

/// Records `a = softmax(e_R·e_Sᵀ/√d)·e_S` over unmasked seeker positions and
/// `h = e_R + a`. No learned projections, single head.
pub fn fuse_graph<T: Scalar>(
    tape: &mut Tape<'_, T>,
    response: Var,
    seeker: Var,
    seeker_mask: &[bool],
) -> Result<FusionGraph> {
    let d = tape.value(response).cols();
    if tape.value(seeker).cols() != d {
        return Err(Error::Shape(format!(
            "encodings differ in width: {} vs {}",
            d,
            tape.value(seeker).cols()
        )));
    }
    let st = tape.transpose(seeker)?;
    let scores = tape.matmul(response, st)?;
    let scores = tape.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
    let weights = tape.masked_softmax(scores, seeker_mask)?;
    let attended = tape.matmul(weights, seeker)?;
    let hidden = tape.add(response, attended)?;
    Ok(FusionGraph {
        weights,
        attended,
        hidden,
    })
}

/// Value-level fusion of a response encoding (`n×d`) with a seeker encoding (`m×d`).
pub fn fuse<T: Scalar>(response: &Tensor<T>, seeker: &Tensor<T>, seeker_mask: &[bool]) -> Result<FusionOutput<T>> {
    let mut tape = Tape::inference();
    let r = tape.constant(response.clone());
    let s = tape.constant(seeker.clone());
    let g = fuse_graph(&mut tape, r, s, seeker_mask)?;
    Ok(FusionOutput {
        weights: tape.value(g.weights).clone(),
        attended: tape.value(g.attended).clone(),
        hidden: tape.value(g.hidden).clone(),
    })
}

/// Per-mechanism output for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mechanism: Mechanism,
    pub level: Level,
    pub level_probs: [f64; 3],
    /// One entry per response token.
    pub rationale_mask: Vec<bool>,
    /// Byte intervals into the response text.
    pub rationale_spans: Vec<Span>,
}

/// Tape records of one forward pass.
pub struct ForwardGraph {
    /// `1×3`.
    pub identification_logits: Var,
    /// `n×2` over every response position including `[CLS]`/`[SEP]`.
    pub rationale_logits: Var,
    pub response_encoding: Var,
    pub seeker_encoding: Option<Var>,
    pub fusion: Option<FusionGraph>,
    /// Number of real response tokens (positions `1..=n`).
    pub response_tokens: usize,
}

/// Values of one forward pass, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub prediction: Prediction,
    pub response_encoding: Tensor<T>,
    pub seeker_encoding: Option<Tensor<T>>,
    pub fusion: Option<FusionOutput<T>>,
    pub identification_logits: Tensor<T>,
    pub rationale_logits: Tensor<T>,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> BiEncoderModel<T> {
    pub fn new(
        mechanism: Mechanism,
        seeker_config: EncoderConfig,
        response_config: EncoderConfig,
        flags: ModelFlags,
        seed: u64,
    ) -> Result<Self> {
        seeker_config.validate()?;
        response_config.validate()?;
        if seeker_config.model_dim != response_config.model_dim {
            return Err(Error::Config(format!(
                "encoders must share model_dim ({} vs {})",
                seeker_config.model_dim, response_config.model_dim
            )));
        }
        let d = response_config.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seeker_encoder = EncoderParams::init(seeker_config, &mut rng);
        let response_encoder = EncoderParams::init(response_config, &mut rng);
        let id_inputs = if flags.use_seeker && !flags.use_attention {
            2 * d
        } else {
            d
        };
        Ok(Self {
            mechanism,
            flags,
            seeker_encoder,
            response_encoder,
            identification_head: Linear::init(id_inputs, 3, &mut rng),
            rationale_head: Linear::init(d, 2, &mut rng),
        })
    }

    /// Same configuration for both encoders.
    pub fn with_config(mechanism: Mechanism, config: EncoderConfig, flags: ModelFlags, seed: u64) -> Result<Self> {
        Self::new(mechanism, config.clone(), config, flags, seed)
    }

    pub fn model_dim(&self) -> usize {
        self.response_encoder.config.model_dim
    }

    /// Checks head shapes against the encoders and flags.
    pub fn validate(&self) -> Result<()> {
        let d = self.model_dim();
        if self.seeker_encoder.config.model_dim != d {
            return Err(Error::Config("encoders must share model_dim".into()));
        }
        let id_inputs = if self.flags.use_seeker && !self.flags.use_attention {
            2 * d
        } else {
            d
        };
        if self.identification_head.inputs() != id_inputs || self.identification_head.outputs() != 3 {
            return Err(Error::Config("identification head shape does not match".into()));
        }
        if self.rationale_head.inputs() != d || self.rationale_head.outputs() != 2 {
            return Err(Error::Config("rationale head shape does not match".into()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> BiEncoderModel<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        BiEncoderModel {
            mechanism: self.mechanism,
            flags: self.flags,
            seeker_encoder: self.seeker_encoder.cast(),
            response_encoder: self.response_encoder.cast(),
            identification_head: lin(&self.identification_head),
            rationale_head: lin(&self.rationale_head),
        }
    }

    /// Records the forward pass. Padding is stripped before encoding.
    pub fn forward_graph<'a>(&'a self, tape: &mut Tape<'a, T>, pair: &TokenizedPair, mode: Mode) -> Result<ForwardGraph> {
        let response_ids = pair.response_unpadded();
        if response_ids.len() < 2 {
            return Err(Error::Shape("response ids must be framed by [CLS] and [SEP]".into()));
        }
        let response_tokens = response_ids.len() - 2;
        if response_tokens != pair.response_token_count() {
            return Err(Error::Shape(format!(
                "{} response positions but {} token offsets",
                response_tokens,
                pair.response_token_count()
            )));
        }
        let er = encode_graph(tape, &self.response_encoder, response_ids, mode.derive(1))?.hidden;

        let es = if self.flags.use_seeker {
            let seeker_ids = pair.seeker_unpadded();
            Some(encode_graph(tape, &self.seeker_encoder, seeker_ids, mode.derive(2))?.hidden)
        } else {
            None
        };

        let fusion = match es {
            Some(es) if self.flags.use_attention => {
                let m = tape.value(es).rows();
                Some(fuse_graph(tape, er, es, &vec![true; m])?)
            }
            _ => None,
        };
        let hidden = fusion.as_ref().map_or(er, |f| f.hidden);

        let cls = match es {
            Some(es) if !self.flags.use_attention => {
                let s_cls = tape.gather_rows(es, &[0])?;
                let r_cls = tape.gather_rows(er, &[0])?;
                tape.concat_cols(&[s_cls, r_cls])?
            }
            _ => tape.gather_rows(hidden, &[0])?,
        };
        let identification_logits = linear(tape, cls, &self.identification_head)?;
        let rationale_logits = linear(tape, hidden, &self.rationale_head)?;
        Ok(ForwardGraph {
            identification_logits,
            rationale_logits,
            response_encoding: er,
            seeker_encoding: es,
            fusion,
            response_tokens,
        })
    }

    /// Multi-task loss `λ_EI·CE(level) + λ_RE·mean token CE(rationale)`. The rationale
    /// term covers real response tokens only and is omitted when its weight is zero,
    /// rationales are disabled, or the response has no tokens.
    pub fn loss_graph(
        &self,
        tape: &mut Tape<'_, T>,
        graph: &ForwardGraph,
        target: &RationaleTarget,
        weights: LossWeights,
    ) -> Result<Var> {
        if target.mask.len() != graph.response_tokens {
            return Err(Error::Shape(format!(
                "gold mask of {} for {} response tokens",
                target.mask.len(),
                graph.response_tokens
            )));
        }
        let ce = tape.cross_entropy(graph.identification_logits, &[target.level.index()])?;
        let mut loss = tape.scale(ce, T::lit(weights.identification));
        if self.flags.use_rationales && weights.rationale != 0.0 && graph.response_tokens > 0 {
            let rows: Vec<usize> = (1..=graph.response_tokens).collect();
            let token_logits = tape.gather_rows(graph.rationale_logits, &rows)?;
            let gold: Vec<usize> = target.mask.iter().map(|&m| usize::from(m)).collect();
            let rce = tape.cross_entropy(token_logits, &gold)?;
            let rce = tape.scale(rce, T::lit(weights.rationale));
            loss = tape.add(loss, rce)?;
        }
        Ok(loss)
    }

    fn target<'p>(&self, pair: &'p TokenizedPair) -> Result<&'p RationaleTarget> {
        pair.target(self.mechanism)
            .ok_or_else(|| Error::validation("pair", "pair carries no gold labels"))
    }

    pub fn loss(&self, pair: &TokenizedPair, weights: LossWeights, mode: Mode) -> Result<T> {
        let target = self.target(pair)?;
        let mut tape = Tape::inference();
        let g = self.forward_graph(&mut tape, pair, mode)?;
        let l = self.loss_graph(&mut tape, &g, target, weights)?;
        Ok(tape.value(l).data()[0])
    }

    /// Loss and its gradient for every parameter, in canonical order. Parameters the
    /// loss does not reach get zero gradients.
    pub fn loss_and_grads(&self, pair: &TokenizedPair, weights: LossWeights, mode: Mode) -> Result<(T, Vec<Tensor<T>>)> {
        let target = self.target(pair)?;
        let mut tape = Tape::new();
        let g = self.forward_graph(&mut tape, pair, mode)?;
        let l = self.loss_graph(&mut tape, &g, target, weights)?;
        let grads = tape.backward(l)?;
        let value = tape.value(l).data()[0];
        Ok((value, self.collect_grads(&grads)))
    }

    pub fn collect_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| {
                grads
                    .of_param(t)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }

    pub fn forward_trace(&self, pair: &TokenizedPair, mode: Mode) -> Result<ForwardTrace<T>> {
        let mut tape = Tape::inference();
        let g = self.forward_graph(&mut tape, pair, mode)?;
        let id_logits = tape.value(g.identification_logits).clone();
        let rat_logits = tape.value(g.rationale_logits).clone();

        let logits_f64: Vec<f64> = id_logits.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let level = Level::from_index(argmax(&logits_f64)).expect("three classes");
        let probs_t = id_logits.softmax(1)?;
        let mut level_probs = [0.0; 3];
        for (p, v) in level_probs.iter_mut().zip(probs_t.data()) {
            *p = v.to_f64().unwrap_or(f64::NAN);
        }
        let rationale_mask: Vec<bool> = (1..=g.response_tokens)
            .map(|j| argmax(rat_logits.row(j)) == 1)
            .collect();
        let rationale_spans = mask_to_spans(&rationale_mask, &pair.response_offsets);

        Ok(ForwardTrace {
            prediction: Prediction {
                mechanism: self.mechanism,
                level,
                level_probs,
                rationale_mask,
                rationale_spans,
            },
            response_encoding: tape.value(g.response_encoding).clone(),
            seeker_encoding: g.seeker_encoding.map(|v| tape.value(v).clone()),
            fusion: g.fusion.as_ref().map(|f| FusionOutput {
                weights: tape.value(f.weights).clone(),
                attended: tape.value(f.attended).clone(),
                hidden: tape.value(f.hidden).clone(),
            }),
            identification_logits: id_logits,
            rationale_logits: rat_logits,
        })
    }

    pub fn forward(&self, pair: &TokenizedPair, mode: Mode) -> Result<Prediction> {
        Ok(self.forward_trace(pair, mode)?.prediction)
    }

    pub fn predict(&self, pair: &TokenizedPair) -> Result<Prediction> {
        self.forward(pair, Mode::Eval)
    }
}

impl<T: Scalar> Parameters<T> for BiEncoderModel<T> {
    fn collect<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor<T>)>) {
        self.seeker_encoder.collect(&join(prefix, "seeker_encoder"), out);
        self.response_encoder.collect(&join(prefix, "response_encoder"), out);
        self.identification_head.collect(&join(prefix, "identification_head"), out);
        self.rationale_head.collect(&join(prefix, "rationale_head"), out);
    }

    fn collect_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor<T>>) {
        self.seeker_encoder.collect_mut(out);
        self.response_encoder.collect_mut(out);
        self.identification_head.collect_mut(out);
        self.rationale_head.collect_mut(out);
    }
}
