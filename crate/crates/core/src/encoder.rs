//! Post-layer-norm transformer encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{join, truncated_normal, Linear, Parameters, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::vocab::PAD_ID;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_prob: f64,
}

impl EncoderConfig {
    /// Two layers, two heads, d = 64, feed-forward 128, 64 positions.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            model_dim: 64,
            ff_dim: 128,
            max_len: 64,
            vocab_size,
            dropout_prob: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!(
                "dropout_prob {} not in [0, 1)",
                self.dropout_prob
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Forward-pass mode. Dropout masks in training mode are drawn from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

impl Mode {
    /// Independent sub-stream for a component of a larger forward pass.
    pub fn derive(self, salt: u64) -> Mode {
        match self {
            Mode::Train { seed } => Mode::Train {
                seed: seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            },
            Mode::Eval => Mode::Eval,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub attn_norm_gain: Tensor<T>,
    pub attn_norm_bias: Tensor<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
    pub ff_norm_gain: Tensor<T>,
    pub ff_norm_bias: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        Self {
            query: Linear::init(d, d, rng),
            key: Linear::init(d, d, rng),
            value: Linear::init(d, d, rng),
            output: Linear::init(d, d, rng),
            attn_norm_gain: Tensor::full(&[d], T::one()),
            attn_norm_bias: Tensor::zeros(&[d]),
            ff_in: Linear::init(d, cfg.ff_dim, rng),
            ff_out: Linear::init(cfg.ff_dim, d, rng),
            ff_norm_gain: Tensor::full(&[d], T::one()),
            ff_norm_bias: Tensor::zeros(&[d]),
        }
    }
}

impl<T: Scalar> Parameters<T> for LayerParams<T> {
    fn collect<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor<T>)>) {
        self.query.collect(&join(prefix, "attn.query"), out);
        self.key.collect(&join(prefix, "attn.key"), out);
        self.value.collect(&join(prefix, "attn.value"), out);
        self.output.collect(&join(prefix, "attn.output"), out);
        out.push((join(prefix, "attn_norm.gain"), &self.attn_norm_gain));
        out.push((join(prefix, "attn_norm.bias"), &self.attn_norm_bias));
        self.ff_in.collect(&join(prefix, "ff.in"), out);
        self.ff_out.collect(&join(prefix, "ff.out"), out);
        out.push((join(prefix, "ff_norm.gain"), &self.ff_norm_gain));
        out.push((join(prefix, "ff_norm.bias"), &self.ff_norm_bias));
    }

    fn collect_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor<T>>) {
        self.query.collect_mut(out);
        self.key.collect_mut(out);
        self.value.collect_mut(out);
        self.output.collect_mut(out);
        out.push(&mut self.attn_norm_gain);
        out.push(&mut self.attn_norm_bias);
        self.ff_in.collect_mut(out);
        self.ff_out.collect_mut(out);
        out.push(&mut self.ff_norm_gain);
        out.push(&mut self.ff_norm_bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
}

/// Truncated-normal weights (σ = 0.02), zero biases, unit norm gains.
pub fn init_params<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(EncoderParams::init(config.clone(), &mut rng))
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Self {
        let d = config.model_dim;
        let token_embedding = truncated_normal(&[config.vocab_size, d], INIT_STD, rng);
        let position_embedding = truncated_normal(&[config.max_len, d], INIT_STD, rng);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams::init(&config, rng))
            .collect();
        Self {
            config,
            token_embedding,
            position_embedding,
            layers,
        }
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        EncoderParams {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    query: lin(&l.query),
                    key: lin(&l.key),
                    value: lin(&l.value),
                    output: lin(&l.output),
                    attn_norm_gain: l.attn_norm_gain.cast(),
                    attn_norm_bias: l.attn_norm_bias.cast(),
                    ff_in: lin(&l.ff_in),
                    ff_out: lin(&l.ff_out),
                    ff_norm_gain: l.ff_norm_gain.cast(),
                    ff_norm_bias: l.ff_norm_bias.cast(),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for EncoderParams<T> {
    fn collect<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor<T>)>) {
        out.push((join(prefix, "token_embedding"), &self.token_embedding));
        out.push((join(prefix, "position_embedding"), &self.position_embedding));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&join(prefix, &format!("layers.{i}")), out);
        }
    }

    fn collect_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor<T>>) {
        out.push(&mut self.token_embedding);
        out.push(&mut self.position_embedding);
        for layer in &mut self.layers {
            layer.collect_mut(out);
        }
    }
}

/// Records of one encoder pass on a tape.
pub struct EncoderGraph {
    pub hidden: Var,
    /// Attention weights, one `n×n` matrix per layer and head (layer-major).
    pub attention: Vec<Var>,
    pub attention_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    /// `n×d` per-position representations.
    pub hidden: Tensor<T>,
    /// `false` for `[PAD]` positions.
    pub attention_mask: Vec<bool>,
    pub attention: Vec<Tensor<T>>,
}

pub(crate) fn linear<'a, T: Scalar>(tape: &mut Tape<'a, T>, x: Var, l: &'a Linear<T>) -> Result<Var> {
    let w = tape.param(&l.weight);
    let b = tape.param(&l.bias);
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn dropout<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let n = tape.value(x).len();
    let factors = (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    tape.mul_const(x, factors)
}

/// Records the encoder on `tape`. `[PAD]` positions are excluded from attention as keys.
pub fn encode_graph<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    params: &'a EncoderParams<T>,
    ids: &[usize],
    mode: Mode,
) -> Result<EncoderGraph> {
    let mask: Vec<bool> = ids.iter().map(|&i| i != PAD_ID).collect();
    encode_graph_masked(tape, params, ids, &mask, mode)
}

/// Like [`encode_graph`] with an explicit key mask (`false` = masked).
pub fn encode_graph_masked<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    params: &'a EncoderParams<T>,
    ids: &[usize],
    mask: &[bool],
    mode: Mode,
) -> Result<EncoderGraph> {
    let cfg = &params.config;
    if ids.is_empty() || ids.len() > cfg.max_len {
        return Err(Error::Shape(format!(
            "sequence length {} not in 1..={}",
            ids.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Index(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let mut rng = match mode {
        Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Mode::Eval => None,
    };
    let p = cfg.dropout_prob;
    if mask.len() != ids.len() {
        return Err(Error::Shape(format!(
            "mask of {} entries for {} ids",
            mask.len(),
            ids.len()
        )));
    }
    let n = ids.len();
    let positions: Vec<usize> = (0..n).collect();

    let tok_table = tape.param(&params.token_embedding);
    let pos_table = tape.param(&params.position_embedding);
    let tok = tape.gather_rows(tok_table, ids)?;
    let pos = tape.gather_rows(pos_table, &positions)?;
    let mut x = tape.add(tok, pos)?;
    x = dropout(tape, x, p, rng.as_mut())?;

    let dh = cfg.head_dim();
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut attention = Vec::with_capacity(cfg.num_layers * cfg.num_heads);
    for layer in &params.layers {
        let q = linear(tape, x, &layer.query)?;
        let k = linear(tape, x, &layer.key)?;
        let v = linear(tape, x, &layer.value)?;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if cfg.num_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, lo, hi)?,
                    tape.slice_cols(k, lo, hi)?,
                    tape.slice_cols(v, lo, hi)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.masked_softmax(scores, mask)?;
            attention.push(weights);
            heads.push(tape.matmul(weights, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let attn = linear(tape, merged, &layer.output)?;
        let attn = dropout(tape, attn, p, rng.as_mut())?;
        let res = tape.add(x, attn)?;
        let g = tape.param(&layer.attn_norm_gain);
        let b = tape.param(&layer.attn_norm_bias);
        x = tape.layer_norm(res, g, b)?;

        let ff = linear(tape, x, &layer.ff_in)?;
        let ff = tape.gelu(ff);
        let ff = linear(tape, ff, &layer.ff_out)?;
        let ff = dropout(tape, ff, p, rng.as_mut())?;
        let res = tape.add(x, ff)?;
        let g = tape.param(&layer.ff_norm_gain);
        let b = tape.param(&layer.ff_norm_bias);
        x = tape.layer_norm(res, g, b)?;
    }
    Ok(EncoderGraph {
        hidden: x,
        attention,
        attention_mask: mask.to_vec(),
    })
}

/// Value-level encoder pass.
pub fn encode<T: Scalar>(ids: &[usize], params: &EncoderParams<T>, mode: Mode) -> Result<EncoderOutput<T>> {
    let mut tape = Tape::inference();
    let g = encode_graph(&mut tape, params, ids, mode)?;
    Ok(EncoderOutput {
        hidden: tape.value(g.hidden).clone(),
        attention_mask: g.attention_mask,
        attention: g.attention.iter().map(|&a| tape.value(a).clone()).collect(),
    })
}
