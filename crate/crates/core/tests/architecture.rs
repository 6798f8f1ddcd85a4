//! Encoder, fusion and head structure against plain-loop reimplementations.

use empathy_core::encoder::{encode, init_params, EncoderParams};
use empathy_core::fixtures::demo_corpus;
use empathy_core::model::{fuse, ModelFlags};
use empathy_core::params::{Linear, Parameters};
use empathy_core::text::{encode_pair, encode_texts};
use empathy_core::{BiEncoder64, EncoderConfig, LossWeights, Mechanism, Mode, Tensor64, TokenizedPair, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn rows(t: &Tensor64) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn random_mat(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Mat {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

fn to_tensor(m: &Mat) -> Tensor64 {
    let data: Vec<f64> = m.iter().flatten().copied().collect();
    Tensor64::new(vec![m.len(), m[0].len()], data).unwrap()
}

fn softmax_masked(xs: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = xs
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().zip(keep).map(|(&x, &k)| if k { (x - max).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn assert_close(a: &Mat, b: &Mat, tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: rows");
    for (i, (ra, rb)) in a.iter().zip(b).enumerate() {
        for (j, (x, y)) in ra.iter().zip(rb).enumerate() {
            assert!((x - y).abs() <= tol, "{what}[{i}][{j}]: {x} vs {y}");
        }
    }
}

/// Brute-force fusion: per response row, masked softmax over scaled dot products with
/// every seeker row, weighted sum of seeker rows, plus the residual.
fn fuse_oracle(r: &Mat, s: &Mat, keep: &[bool]) -> (Mat, Mat, Mat) {
    let d = r[0].len() as f64;
    let mut weights = Vec::new();
    let mut attended = Vec::new();
    let mut hidden = Vec::new();
    for ri in r {
        let scores: Vec<f64> = s
            .iter()
            .map(|sj| ri.iter().zip(sj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let w = softmax_masked(&scores, keep);
        let a: Vec<f64> = (0..r[0].len()).map(|k| w.iter().zip(s).map(|(wj, sj)| wj * sj[k]).sum()).collect();
        hidden.push(ri.iter().zip(&a).map(|(x, y)| x + y).collect());
        weights.push(w);
        attended.push(a);
    }
    (weights, attended, hidden)
}

#[test]
fn fusion_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let (n, m, d) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..17));
        let r = random_mat(n, d, &mut rng);
        let s = random_mat(m, d, &mut rng);
        let mut keep: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
        keep[rng.random_range(0..m)] = true;
        let out = fuse(&to_tensor(&r), &to_tensor(&s), &keep).unwrap();
        let (w, a, h) = fuse_oracle(&r, &s, &keep);
        assert_close(&rows(&out.weights), &w, 1e-6, &format!("case {case} weights"));
        assert_close(&rows(&out.attended), &a, 1e-6, &format!("case {case} attended"));
        assert_close(&rows(&out.hidden), &h, 1e-6, &format!("case {case} hidden"));
        for row in rows(&out.weights) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            for (wj, k) in row.iter().zip(&keep) {
                if !k {
                    assert_eq!(*wj, 0.0);
                }
            }
        }
        let diff: Vec<f64> = out.hidden.data().iter().zip(r.iter().flatten()).map(|(h, r)| h - r).collect();
        assert_close(&vec![diff], &vec![out.attended.data().to_vec()], 1e-12, "h - eR");
    }
}

fn linear_rows(x: &Mat, l: &Linear<f64>) -> Mat {
    let (din, dout) = (l.inputs(), l.outputs());
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|j| l.bias.data()[j] + (0..din).map(|i| row[i] * l.weight.at(i, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm_rows(x: &Mat, g: &Tensor64, b: &Tensor64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Post-LN encoder written out with explicit loops.
fn encoder_oracle(ids: &[usize], p: &EncoderParams<f64>, keep: &[bool]) -> Mat {
    let c = &p.config;
    let dh = c.model_dim / c.num_heads;
    let mut x: Mat = ids
        .iter()
        .enumerate()
        .map(|(pos, &id)| {
            (0..c.model_dim)
                .map(|k| p.token_embedding.at(id, k) + p.position_embedding.at(pos, k))
                .collect()
        })
        .collect();
    for layer in &p.layers {
        let q = linear_rows(&x, &layer.query);
        let k = linear_rows(&x, &layer.key);
        let v = linear_rows(&x, &layer.value);
        let mut merged = vec![vec![0.0; c.model_dim]; ids.len()];
        for h in 0..c.num_heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..ids.len() {
                let scores: Vec<f64> = (0..ids.len())
                    .map(|j| cols.clone().map(|t| q[i][t] * k[j][t]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let w = softmax_masked(&scores, keep);
                for t in cols.clone() {
                    merged[i][t] = (0..ids.len()).map(|j| w[j] * v[j][t]).sum();
                }
            }
        }
        let attn = linear_rows(&merged, &layer.output);
        x = layer_norm_rows(&add(&x, &attn), &layer.attn_norm_gain, &layer.attn_norm_bias);
        let hidden: Mat = linear_rows(&x, &layer.ff_in)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let ff = linear_rows(&hidden, &layer.ff_out);
        x = layer_norm_rows(&add(&x, &ff), &layer.ff_norm_gain, &layer.ff_norm_bias);
    }
    x
}

/// Moves every parameter off its initial value so biases and gains matter.
fn jitter(p: &mut EncoderParams<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.params_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn config(layers: usize, heads: usize, d: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        num_heads: heads,
        model_dim: d,
        ff_dim: 2 * d,
        max_len: 8,
        vocab_size: 12,
        dropout_prob: 0.1,
    }
}

#[test]
fn single_layer_single_head_encoder_matches_hand_unrolled_oracle() {
    let mut p: EncoderParams<f64> = init_params(&config(1, 1, 4), 3).unwrap();
    jitter(&mut p, 4);
    let ids = [2, 7, 5, 9, 3];
    let out = encode(&ids, &p, Mode::Eval).unwrap();
    assert_close(&rows(&out.hidden), &encoder_oracle(&ids, &p, &[true; 5]), 1e-10, "L1H1d4");
}

#[test]
fn toy_encoder_matches_oracle_with_padding() {
    let mut p: EncoderParams<f64> = init_params(&config(2, 2, 16), 5).unwrap();
    jitter(&mut p, 6);
    let ids = [2, 5, 11, 6, 3, 0, 0];
    let keep: Vec<bool> = ids.iter().map(|&i| i != 0).collect();
    let out = encode(&ids, &p, Mode::Eval).unwrap();
    assert_close(&rows(&out.hidden), &encoder_oracle(&ids, &p, &keep), 1e-10, "L2H2d16");
    for a in &out.attention {
        for r in 0..a.rows() {
            let row = a.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row[5..].iter().all(|&w| w == 0.0));
        }
    }
}

struct Fixture {
    vocab: Vocabulary,
    pairs: Vec<TokenizedPair>,
}

fn fixture() -> Fixture {
    let raw = demo_corpus(12, 8);
    let vocab = Vocabulary::build(raw.iter().flat_map(|p| [p.seeker.as_str(), p.response.as_str()]), 1);
    let pairs = raw.iter().map(|p| encode_pair(p, &vocab, 24).unwrap()).collect();
    Fixture { vocab, pairs }
}

fn model(vocab: &Vocabulary, flags: ModelFlags) -> BiEncoder64 {
    let mut c = EncoderConfig::toy(vocab.len());
    c.max_len = 24;
    c.model_dim = 16;
    c.ff_dim = 32;
    BiEncoder64::with_config(Mechanism::EmotionalReactions, c, flags, 10).unwrap()
}

#[test]
fn full_model_residual_and_attention_rows() {
    let f = fixture();
    let m = model(&f.vocab, ModelFlags::default());
    for pair in &f.pairs {
        let t = m.forward_trace(pair, Mode::Eval).unwrap();
        let fusion = t.fusion.unwrap();
        for ((h, r), a) in fusion.hidden.data().iter().zip(t.response_encoding.data()).zip(fusion.attended.data()) {
            assert!((h - r - a).abs() < 1e-12);
        }
        for r in 0..fusion.weights.rows() {
            assert!((fusion.weights.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(t.prediction.rationale_mask.len(), pair.response_token_count());
    }
}

#[test]
fn no_seeker_model_ignores_seeker_text() {
    let f = fixture();
    let flags = ModelFlags {
        use_seeker: false,
        ..ModelFlags::default()
    };
    let m = model(&f.vocab, flags);
    let response = "ok I feel really sad for you";
    let a = encode_texts("I am about to have an anxiety attack.", response, &f.vocab, 24).unwrap();
    let b = encode_texts("My best friend moved away last week.", response, &f.vocab, 24).unwrap();
    let (ta, tb) = (m.forward_trace(&a, Mode::Eval).unwrap(), m.forward_trace(&b, Mode::Eval).unwrap());
    assert_eq!(ta.identification_logits, tb.identification_logits);
    assert_eq!(ta.rationale_logits, tb.rationale_logits);
    assert!(ta.fusion.is_none() && ta.seeker_encoding.is_none());
    let mut pair = f.pairs[0].clone();
    let (_, grads) = m.loss_and_grads(&pair, LossWeights::default(), Mode::Eval).unwrap();
    let names = m.named_params();
    for ((name, _), g) in names.iter().zip(&grads) {
        if name.starts_with("seeker_encoder") {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    pair.seeker_ids[1] = 4;
    assert_eq!(
        m.loss(&pair, LossWeights::default(), Mode::Eval).unwrap(),
        m.loss(&f.pairs[0], LossWeights::default(), Mode::Eval).unwrap()
    );

    let full = model(&f.vocab, ModelFlags::default());
    assert_ne!(
        full.forward_trace(&a, Mode::Eval).unwrap().identification_logits,
        full.forward_trace(&b, Mode::Eval).unwrap().identification_logits
    );
}

#[test]
fn concat_variant_uses_both_cls_vectors() {
    let f = fixture();
    let flags = ModelFlags {
        use_attention: false,
        ..ModelFlags::default()
    };
    let m = model(&f.vocab, flags);
    assert_eq!(m.identification_head.inputs(), 2 * m.model_dim());
    let t = m.forward_trace(&f.pairs[0], Mode::Eval).unwrap();
    assert!(t.fusion.is_none());
    // Rationale logits come straight from the response encoding.
    let er = t.response_encoding;
    let d = m.model_dim();
    for r in 0..er.rows() {
        for j in 0..2 {
            let v: f64 = m.rationale_head.bias.data()[j]
                + (0..d).map(|k| er.at(r, k) * m.rationale_head.weight.at(k, j)).sum::<f64>();
            assert!((v - t.rationale_logits.at(r, j)).abs() < 1e-12);
        }
    }
    let s = t.seeker_encoding.unwrap();
    let cls: Vec<f64> = s.row(0).iter().chain(er.row(0)).copied().collect();
    for j in 0..3 {
        let v: f64 = m.identification_head.bias.data()[j]
            + cls.iter().enumerate().map(|(k, x)| x * m.identification_head.weight.at(k, j)).sum::<f64>();
        assert!((v - t.identification_logits.data()[j]).abs() < 1e-12);
    }
}

#[test]
fn zero_rationale_weight_leaves_rationale_head_without_gradient() {
    let f = fixture();
    let pair = f.pairs.iter().find(|p| p.response_token_count() > 0).unwrap();
    for (flags, weights) in [
        (ModelFlags::default(), LossWeights { identification: 1.0, rationale: 0.0 }),
        (ModelFlags { use_rationales: false, ..ModelFlags::default() }, LossWeights::default()),
    ] {
        let m = model(&f.vocab, flags);
        let (_, grads) = m.loss_and_grads(pair, weights, Mode::Eval).unwrap();
        let names = m.named_params();
        for ((name, _), g) in names.iter().zip(&grads) {
            let zero = g.data().iter().all(|&v| v == 0.0);
            if name.starts_with("rationale_head") {
                assert!(zero, "{name} should be gradient-free");
            }
            if name.starts_with("identification_head") {
                assert!(!zero, "{name} should be trained");
            }
        }
    }
    let m = model(&f.vocab, ModelFlags::default());
    let (_, grads) = m.loss_and_grads(pair, LossWeights::default(), Mode::Eval).unwrap();
    let last = grads.last().unwrap();
    assert!(last.data().iter().any(|&v| v != 0.0));
}

#[test]
fn zero_heads_give_uniform_loss() {
    let f = fixture();
    let mut m = model(&f.vocab, ModelFlags::default());
    m.identification_head = Linear::zeros(m.model_dim(), 3);
    m.rationale_head = Linear::zeros(m.model_dim(), 2);
    let pair = f.pairs.iter().find(|p| p.response_token_count() > 0).unwrap();
    let loss = m.loss(pair, LossWeights::default(), Mode::Eval).unwrap();
    let expected = 3f64.ln() + 0.5 * 2f64.ln();
    assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    assert!((expected - 1.4452).abs() < 1e-4);
}

#[test]
fn padding_length_does_not_change_predictions() {
    let f = fixture();
    let m = model(&f.vocab, ModelFlags::default());
    let short = encode_texts("I can't sleep", "hang in there ok", &f.vocab, 10).unwrap();
    let long = encode_texts("I can't sleep", "hang in there ok", &f.vocab, 24).unwrap();
    assert_eq!(m.predict(&short).unwrap(), m.predict(&long).unwrap());
}

#[test]
fn dropout_only_in_training_mode() {
    let f = fixture();
    let m = model(&f.vocab, ModelFlags::default());
    let p = &f.pairs[0];
    let w = LossWeights::default();
    assert_eq!(m.loss(p, w, Mode::Eval).unwrap(), m.loss(p, w, Mode::Eval).unwrap());
    let a = m.loss(p, w, Mode::Train { seed: 1 }).unwrap();
    assert_eq!(a, m.loss(p, w, Mode::Train { seed: 1 }).unwrap());
    assert_ne!(a, m.loss(p, w, Mode::Train { seed: 2 }).unwrap());
}
