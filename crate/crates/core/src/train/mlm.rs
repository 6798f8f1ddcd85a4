use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::encoder::{encode_graph, linear, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::model::{argmax, BiEncoderModel};
use crate::params::{Linear, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::encode::encode_text;
use crate::text::vocab::{Vocabulary, MASK_ID, PAD_ID};
use crate::train::config::MlmConfig;
use crate::train::optim::Adam;
use crate::train::trainer::{mix, sum_grads};

/// A corrupted sequence and what the model should recover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Selects each regular token with probability `mask_prob`. A selected token becomes
/// `[MASK]` 80% of the time, a random regular token 10% and stays unchanged 10%.
pub fn mask_tokens<R: Rng + ?Sized>(ids: &[usize], vocab: &Vocabulary, mask_prob: f64, rng: &mut R) -> MaskedSequence {
    let regular = vocab.regular_ids();
    let mut input = ids.to_vec();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (pos, &id) in ids.iter().enumerate() {
        if Vocabulary::is_reserved(id) || rng.random::<f64>() >= mask_prob {
            continue;
        }
        positions.push(pos);
        targets.push(id);
        let r: f64 = rng.random();
        input[pos] = if r < 0.8 {
            MASK_ID
        } else if r < 0.9 && !regular.is_empty() {
            rng.random_range(regular.clone())
        } else {
            id
        };
    }
    MaskedSequence {
        input,
        positions,
        targets,
    }
}

pub struct MlmOutcome<T> {
    pub encoder: EncoderParams<T>,
    /// Output projection `d×V`.
    pub head: Linear<T>,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
}

fn unpadded(ids: &[usize]) -> &[usize] {
    let n = ids.iter().rposition(|&i| i != PAD_ID).map_or(0, |i| i + 1);
    &ids[..n]
}

fn sequence_loss_and_grads<T: Scalar>(
    encoder: &EncoderParams<T>,
    head: &Linear<T>,
    seq: &MaskedSequence,
    mode: Mode,
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let hidden = encode_graph(&mut tape, encoder, &seq.input, mode)?.hidden;
    let rows = tape.gather_rows(hidden, &seq.positions)?;
    let logits = linear(&mut tape, rows, head)?;
    let loss = tape.cross_entropy(logits, &seq.targets)?;
    let grads = tape.backward(loss)?;
    let all = encoder.named_params().into_iter().chain(head.named_params());
    let collected = all
        .map(|(_, t)| grads.of_param(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((tape.value(loss).data()[0], collected))
}

/// Masked-LM pretraining of one encoder on unlabeled text.
pub fn pretrain_mlm<T: Scalar>(
    texts: &[&str],
    vocab: &Vocabulary,
    mut encoder: EncoderParams<T>,
    config: &MlmConfig,
    seed: u64,
) -> Result<MlmOutcome<T>> {
    config.validate()?;
    encoder.config.validate()?;
    if texts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if encoder.config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "encoder expects {} tokens, vocabulary has {}",
            encoder.config.vocab_size,
            vocab.len()
        )));
    }
    let sequences: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| encode_text(t, vocab, encoder.config.max_len).map(|(ids, _)| unpadded(&ids).to_vec()))
        .collect::<Result<_>>()?;
    if !sequences.iter().flatten().any(|&id| !Vocabulary::is_reserved(id)) {
        return Err(Error::NothingToPredict);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = Linear::init(encoder.config.model_dim, vocab.len(), &mut rng);
    let mut adam = {
        let params = encoder.named_params().into_iter().chain(head.named_params());
        Adam::new(params.map(|(_, t)| t), config.learning_rate)
    };
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut step: u64 = 0;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let masked: Vec<MaskedSequence> = batch
                .iter()
                .map(|&i| {
                    let mut r = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(step) ^ mix(i as u64).rotate_left(29)));
                    mask_tokens(&sequences[i], vocab, config.mask_prob, &mut r)
                })
                .filter(|m| !m.positions.is_empty())
                .collect();
            let total: usize = masked.iter().map(|m| m.positions.len()).sum();
            if total == 0 {
                continue;
            }
            let results: Vec<Result<(T, Vec<Tensor<T>>)>> = masked
                .par_iter()
                .enumerate()
                .map(|(k, m)| {
                    let seed = mix(seed.rotate_left(7) ^ mix(step) ^ k as u64);
                    sequence_loss_and_grads(&encoder, &head, m, Mode::Train { seed })
                })
                .collect();
            let mut loss = T::zero();
            let mut grads = Vec::with_capacity(results.len());
            for (r, m) in results.into_iter().zip(&masked) {
                let (l, mut g) = r?;
                let w = T::from_usize_lossy(m.positions.len());
                loss += l * w;
                for t in &mut g {
                    t.data_mut().iter_mut().for_each(|x| *x *= w);
                }
                grads.push(g);
            }
            let scale = T::one() / T::from_usize_lossy(total);
            let grads = sum_grads(grads, scale);
            let mut params = encoder.params_mut();
            params.extend(head.params_mut());
            adam.step(params, &grads)?;
            batch_losses.push((loss * scale).to_f64().unwrap_or(f64::NAN));
        }
        let mean = if batch_losses.is_empty() {
            f64::NAN
        } else {
            batch_losses.iter().sum::<f64>() / batch_losses.len() as f64
        };
        loss_curve.push(mean);
    }

    Ok(MlmOutcome {
        encoder,
        head,
        loss_curve,
    })
}

/// Pretrains the seeker encoder on seeker posts and the response encoder on responses.
pub fn pretrain_model<T: Scalar>(
    model: &mut BiEncoderModel<T>,
    seeker_texts: &[&str],
    response_texts: &[&str],
    vocab: &Vocabulary,
    config: &MlmConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let seeker = pretrain_mlm(seeker_texts, vocab, model.seeker_encoder.clone(), config, mix(seed ^ 1))?;
    let response = pretrain_mlm(response_texts, vocab, model.response_encoder.clone(), config, mix(seed ^ 2))?;
    model.seeker_encoder = seeker.encoder;
    model.response_encoder = response.encoder;
    Ok((seeker.loss_curve, response.loss_curve))
}

/// Most likely token at each position of `ids`.
pub fn predict_tokens<T: Scalar>(encoder: &EncoderParams<T>, head: &Linear<T>, ids: &[usize]) -> Result<Vec<usize>> {
    let mut tape = Tape::inference();
    let hidden = encode_graph(&mut tape, encoder, ids, Mode::Eval)?.hidden;
    let logits = linear(&mut tape, hidden, head)?;
    let logits = tape.value(logits);
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["the cat sat on the mat", "a dog ran"], 1)
    }

    #[test]
    fn masking_skips_reserved_and_keeps_targets() {
        let v = vocab();
        let (ids, _) = encode_text("the cat sat on the mat", &v, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mask_tokens(&ids, &v, 1.0 - 1e-12, &mut rng);
        assert_eq!(m.positions, (1..7).collect::<Vec<_>>());
        for (&p, &t) in m.positions.iter().zip(&m.targets) {
            assert_eq!(ids[p], t);
        }
        for (p, (&a, &b)) in ids.iter().zip(&m.input).enumerate() {
            if !m.positions.contains(&p) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn masking_proportions() {
        let v = vocab();
        let ids: Vec<usize> = std::iter::repeat_n(v.id("cat"), 20_000).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = mask_tokens(&ids, &v, 0.15, &mut rng);
        let n = m.positions.len() as f64;
        assert!((n / 20_000.0 - 0.15).abs() < 0.01);
        let masked = m.positions.iter().filter(|&&p| m.input[p] == MASK_ID).count() as f64;
        assert!((masked / n - 0.8).abs() < 0.03);
        assert!(m.input.iter().all(|&i| i == MASK_ID || v.regular_ids().contains(&i)));
    }

    #[test]
    fn empty_and_degenerate_inputs() {
        let v = vocab();
        let enc: EncoderParams<f32> = crate::encoder::init_params(&EncoderConfig::toy(v.len()), 0).unwrap();
        let cfg = MlmConfig::default();
        assert!(matches!(pretrain_mlm(&[], &v, enc.clone(), &cfg, 0), Err(Error::EmptyCorpus)));
        let zero = MlmConfig { mask_prob: 0.0, ..cfg.clone() };
        assert!(matches!(pretrain_mlm(&["the cat"], &v, enc.clone(), &zero, 0), Err(Error::NothingToPredict)));
        assert!(matches!(pretrain_mlm(&["", "  "], &v, enc, &cfg, 0), Err(Error::NothingToPredict)));
    }

    #[test]
    fn loss_decreases_on_repeated_text() {
        let v = vocab();
        let mut cfg = EncoderConfig::toy(v.len());
        cfg.num_layers = 1;
        cfg.model_dim = 32;
        cfg.ff_dim = 64;
        cfg.max_len = 16;
        cfg.dropout_prob = 0.0;
        let enc: EncoderParams<f32> = crate::encoder::init_params(&cfg, 0).unwrap();
        let texts = vec!["the cat sat on the mat"; 16];
        let mlm = MlmConfig {
            epochs: 30,
            batch_size: 8,
            mask_prob: 0.3,
            learning_rate: 3e-3,
        };
        let out = pretrain_mlm(&texts, &v, enc, &mlm, 5).unwrap();
        let first = out.loss_curve[0];
        let last = *out.loss_curve.last().unwrap();
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}
