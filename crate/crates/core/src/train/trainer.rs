use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::model::BiEncoderModel;
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::encode::TokenizedPair;
use crate::train::config::TrainConfig;
use crate::train::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean of the batch losses.
    pub train_loss: f64,
    pub batch_losses: Vec<f64>,
    pub dev: Option<MetricReport>,
}

pub struct TrainOutcome<T> {
    /// Best model by dev macro-F1 (last epoch when there is no dev set).
    pub model: BiEncoderModel<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

/// SplitMix64 finalizer, used to derive per-example dropout seeds.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn sum_grads<T: Scalar>(per_example: Vec<Vec<Tensor<T>>>, scale: T) -> Vec<Tensor<T>> {
    let mut iter = per_example.into_iter();
    let mut acc = iter.next().expect("non-empty batch");
    for grads in iter {
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += *y;
            }
        }
    }
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    acc
}

/// Supervised multi-task fine-tuning.
pub fn train<T: Scalar>(
    train_set: &[TokenizedPair],
    dev_set: &[TokenizedPair],
    model: BiEncoderModel<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(train_set, dev_set, model, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Scalar>(
    train_set: &[TokenizedPair],
    dev_set: &[TokenizedPair],
    mut model: BiEncoderModel<T>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    model.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(i) = train_set.iter().chain(dev_set).position(|p| p.targets.is_none()) {
        return Err(Error::validation("dataset", format!("pair {i} carries no gold labels")));
    }

    let mut adam = Adam::new(model.named_params().into_iter().map(|(_, t)| t), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, BiEncoderModel<T>)> = None;
    let mut step: u64 = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let results: Vec<Result<(T, Vec<Tensor<T>>)>> = batch
                .par_iter()
                .map(|&i| {
                    let seed = mix(config.seed ^ mix(step) ^ mix(i as u64).rotate_left(17));
                    model.loss_and_grads(&train_set[i], config.loss, Mode::Train { seed })
                })
                .collect();
            let mut losses = T::zero();
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (l, g) = r?;
                losses += l;
                grads.push(g);
            }
            let scale = T::one() / T::from_usize_lossy(batch.len());
            let grads = sum_grads(grads, scale);
            adam.step(model.params_mut(), &grads)?;
            batch_losses.push((losses * scale).to_f64().unwrap_or(f64::NAN));
        }
        let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let dev = if dev_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, dev_set)?)
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss,
            batch_losses,
            dev,
        };
        on_epoch(&metrics);
        let score = metrics.dev.as_ref().map(|r| r.macro_f1);
        match (score, &best) {
            (Some(s), Some((b, _, _))) if s <= *b => {}
            (Some(s), _) => best = Some((s, epoch, model.clone())),
            (None, _) => {}
        }
        history.push(metrics);
    }

    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, config.epochs),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}
