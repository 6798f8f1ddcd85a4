use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::model::{BiEncoderModel, LossWeights};
use crate::params::Parameters;
use crate::tensor::Tensor;
use crate::text::encode::TokenizedPair;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Largest accepted `|analytic - numeric| / max(1, |numeric|)`.
    pub tolerance: f64,
    /// Coordinates checked per tensor; smaller tensors are checked in full.
    pub samples_per_tensor: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tolerance: 1e-3,
            samples_per_tensor: 200,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckFailure {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_error: f64,
    /// Largest error seen in each tensor, canonical order.
    pub per_tensor: Vec<(String, f64)>,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Names of tensors with at least one failing coordinate.
    pub fn failing_tensors(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.failures.iter().map(|f| f.tensor.as_str()).collect();
        names.dedup();
        names
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares backprop gradients with central differences on `pair`, dropout off.
pub fn gradient_check(model: &BiEncoderModel<f64>, pair: &TokenizedPair, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (_, analytic) = model.loss_and_grads(pair, opts.weights, Mode::Eval)?;
    check_gradients(model, pair, &analytic, opts)
}

/// Checks caller-supplied gradients, in canonical parameter order, against central differences.
pub fn check_gradients(
    model: &BiEncoderModel<f64>,
    pair: &TokenizedPair,
    analytic: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let named = model.named_params();
    if named.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} gradient tensors for {} parameters",
            analytic.len(),
            named.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut jobs = Vec::new();
    for (ti, ((_, param), grad)) in named.iter().zip(analytic).enumerate() {
        if param.shape() != grad.shape() {
            return Err(Error::Shape(format!("gradient {ti} has shape {:?}", grad.shape())));
        }
        for j in sample_coordinates(grad.data(), opts.samples_per_tensor, &mut rng) {
            jobs.push((ti, j));
        }
    }

    let results: Vec<Result<(usize, usize, f64)>> = jobs
        .par_iter()
        .map_init(
            || model.clone(),
            |m, &(ti, j)| {
                let orig = m.params_mut()[ti].data()[j];
                m.params_mut()[ti].data_mut()[j] = orig + opts.eps;
                let plus = m.loss(pair, opts.weights, Mode::Eval);
                m.params_mut()[ti].data_mut()[j] = orig - opts.eps;
                let minus = m.loss(pair, opts.weights, Mode::Eval);
                m.params_mut()[ti].data_mut()[j] = orig;
                Ok((ti, j, (plus? - minus?) / (2.0 * opts.eps)))
            },
        )
        .collect();

    let mut per_tensor: Vec<(String, f64)> = named.iter().map(|(n, _)| (n.clone(), 0.0)).collect();
    let mut failures = Vec::new();
    let mut max_error: f64 = 0.0;
    for r in results {
        let (ti, j, numeric) = r?;
        let a = analytic[ti].data()[j];
        let error = relative_error(a, numeric);
        let error = if error.is_nan() { f64::INFINITY } else { error };
        max_error = max_error.max(error);
        per_tensor[ti].1 = per_tensor[ti].1.max(error);
        if error > opts.tolerance {
            failures.push(GradCheckFailure {
                tensor: named[ti].0.clone(),
                index: j,
                analytic: a,
                numeric,
                error,
            });
        }
    }
    Ok(GradCheckReport {
        checked: jobs.len(),
        max_error,
        per_tensor,
        failures,
    })
}

/// Up to `n` indices; half are drawn from coordinates with nonzero gradient so that
/// sparse tensors such as embeddings are exercised where they matter.
fn sample_coordinates(grad: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if grad.len() <= n {
        return (0..grad.len()).collect();
    }
    let mut nonzero: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
    nonzero.shuffle(rng);
    nonzero.truncate(n / 2);
    let mut picked = nonzero;
    let mut seen: std::collections::BTreeSet<usize> = picked.iter().copied().collect();
    for i in index::sample(rng, grad.len(), grad.len().min(2 * n)) {
        if picked.len() >= n {
            break;
        }
        if seen.insert(i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}
