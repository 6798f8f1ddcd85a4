//! Binary checkpoint format.
//!
//! ```text
//! magic "EMPCKPT\0" | version u32 | total length u64
//! header: u32 length + UTF-8 `key=value` lines
//! u32 tensor count, then per tensor: u32 name length, name, u32 rank, u64 dims, data
//! u32 length + vocabulary hash
//! SHA-256 of everything above
//! ```
//! Integers and tensor data are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::labels::Mechanism;
use crate::model::{BiEncoderModel, ModelFlags};
use crate::params::{Linear, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EMPCKPT\0";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

/// Training metadata carried alongside the weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub loss_curve: Vec<f64>,
}

/// A pretrained encoder, optionally with its masked-LM head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCheckpoint<T> {
    pub encoder: EncoderParams<T>,
    pub head: Option<Linear<T>>,
}

/// Hex SHA-256 of a file, used to identify loaded checkpoints.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_config(h: &mut BTreeMap<String, String>, prefix: &str, c: &EncoderConfig) {
    let mut put = |k: &str, v: String| h.insert(format!("{prefix}.{k}"), v);
    put("num_layers", c.num_layers.to_string());
    put("num_heads", c.num_heads.to_string());
    put("model_dim", c.model_dim.to_string());
    put("ff_dim", c.ff_dim.to_string());
    put("max_len", c.max_len.to_string());
    put("vocab_size", c.vocab_size.to_string());
    put("dropout_prob", c.dropout_prob.to_string());
}

fn serialize<T: Scalar>(header: &BTreeMap<String, String>, tensors: &[(String, &Tensor<T>)], vocab_hash: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());
    let text: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, tensors.len());
    for (name, t) in tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    put_u32(&mut out, vocab_hash.len());
    out.extend_from_slice(vocab_hash.as_bytes());
    let total = (out.len() + DIGEST) as u64;
    out[12..20].copy_from_slice(&total.to_le_bytes());
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn model_to_bytes<T: Scalar>(model: &BiEncoderModel<T>, meta: &CheckpointMeta, vocab_hash: &str) -> Vec<u8> {
    let mut h = BTreeMap::new();
    h.insert("kind".into(), "model".into());
    h.insert("dtype".into(), T::DTYPE.into());
    h.insert("mechanism".into(), model.mechanism.code().into());
    h.insert("flags.use_attention".into(), model.flags.use_attention.to_string());
    h.insert("flags.use_seeker".into(), model.flags.use_seeker.to_string());
    h.insert("flags.use_rationales".into(), model.flags.use_rationales.to_string());
    put_config(&mut h, "seeker", &model.seeker_encoder.config);
    put_config(&mut h, "response", &model.response_encoder.config);
    put_meta(&mut h, meta);
    serialize(&h, &model.named_params(), vocab_hash)
}

pub fn encoder_to_bytes<T: Scalar>(ckpt: &EncoderCheckpoint<T>, meta: &CheckpointMeta, vocab_hash: &str) -> Vec<u8> {
    let mut h = BTreeMap::new();
    h.insert("kind".into(), "encoder".into());
    h.insert("dtype".into(), T::DTYPE.into());
    h.insert("has_head".into(), ckpt.head.is_some().to_string());
    put_config(&mut h, "encoder", &ckpt.encoder.config);
    put_meta(&mut h, meta);
    let mut tensors = Vec::new();
    ckpt.encoder.collect("encoder", &mut tensors);
    if let Some(head) = &ckpt.head {
        head.collect("mlm_head", &mut tensors);
    }
    serialize(&h, &tensors, vocab_hash)
}

fn put_meta(h: &mut BTreeMap<String, String>, meta: &CheckpointMeta) {
    h.insert("meta.epoch".into(), meta.epoch.to_string());
    let curve: Vec<String> = meta.loss_curve.iter().map(|v| v.to_string()).collect();
    h.insert("meta.loss_curve".into(), curve.join(","));
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CheckpointMalformed("record runs past end of payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::CheckpointMalformed("dimension overflows".into()))
    }

    fn str(&mut self) -> Result<&'b str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::CheckpointMalformed("invalid UTF-8".into()))
    }
}

struct Decoded {
    header: BTreeMap<String, String>,
    tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    vocab_hash: String,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        if MAGIC.starts_with(bytes) {
            return Err(Error::CheckpointTruncated);
        }
        return Err(Error::CheckpointMalformed("not a checkpoint file".into()));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::CheckpointTruncated);
    }
    let total = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if (bytes.len() as u64) < total {
        return Err(Error::CheckpointTruncated);
    }
    if (bytes.len() as u64) > total {
        return Err(Error::CheckpointMalformed(format!(
            "{} trailing bytes",
            bytes.len() as u64 - total
        )));
    }
    if bytes.len() < PREAMBLE + DIGEST {
        return Err(Error::CheckpointMalformed("declared length too small".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CheckpointCorrupt);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }

    let mut r = Reader { bytes: body, pos: PREAMBLE };
    let mut header = BTreeMap::new();
    for line in r.str()?.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::CheckpointMalformed(format!("header line {line:?}")))?;
        header.insert(k.to_string(), v.to_string());
    }
    let width = match header.get("dtype").map(String::as_str) {
        Some("f32") => 4,
        Some("f64") => 8,
        other => return Err(Error::CheckpointMalformed(format!("dtype {other:?}"))),
    };
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.str()?.to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::CheckpointMalformed(format!("tensor {name} too large")))?;
        let raw = r.take(n)?;
        let data = if width == 4 {
            raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect()
        } else {
            raw.chunks_exact(8).map(f64::read_le).collect()
        };
        tensors.push((name, shape, data));
    }
    let vocab_hash = r.str()?.to_string();
    if r.pos != body.len() {
        return Err(Error::CheckpointMalformed("unexpected bytes after vocabulary hash".into()));
    }
    Ok(Decoded {
        header,
        tensors,
        vocab_hash,
    })
}

fn field<'h>(h: &'h BTreeMap<String, String>, key: &str) -> Result<&'h str> {
    h.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::CheckpointMalformed(format!("missing header key {key}")))
}

fn parse<V: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<V> {
    field(h, key)?
        .parse()
        .map_err(|_| Error::CheckpointMalformed(format!("bad value for {key}")))
}

fn read_config(h: &BTreeMap<String, String>, prefix: &str) -> Result<EncoderConfig> {
    let k = |name: &str| format!("{prefix}.{name}");
    let c = EncoderConfig {
        num_layers: parse(h, &k("num_layers"))?,
        num_heads: parse(h, &k("num_heads"))?,
        model_dim: parse(h, &k("model_dim"))?,
        ff_dim: parse(h, &k("ff_dim"))?,
        max_len: parse(h, &k("max_len"))?,
        vocab_size: parse(h, &k("vocab_size"))?,
        dropout_prob: parse(h, &k("dropout_prob"))?,
    };
    c.validate()
        .map_err(|e| Error::CheckpointMalformed(format!("{prefix} config: {e}")))?;
    Ok(c)
}

fn read_meta(h: &BTreeMap<String, String>) -> Result<CheckpointMeta> {
    let curve = field(h, "meta.loss_curve")?;
    let loss_curve = if curve.is_empty() {
        Vec::new()
    } else {
        curve
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::CheckpointMalformed("bad loss curve".into())))
            .collect::<Result<_>>()?
    };
    Ok(CheckpointMeta {
        epoch: parse(h, "meta.epoch")?,
        loss_curve,
    })
}

fn check_vocab(found: &str, expected: Option<&str>) -> Result<()> {
    match expected {
        Some(e) if e != found => Err(Error::VocabMismatch {
            expected: found.to_string(),
            found: e.to_string(),
        }),
        _ => Ok(()),
    }
}

fn fill<T: Scalar>(target: Vec<(String, &mut Tensor<T>)>, tensors: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<()> {
    if target.len() != tensors.len() {
        return Err(Error::CheckpointMalformed(format!(
            "expected {} tensors, found {}",
            target.len(),
            tensors.len()
        )));
    }
    for ((name, t), (found, shape, data)) in target.into_iter().zip(tensors) {
        if name != found || t.shape() != shape.as_slice() {
            return Err(Error::CheckpointMalformed(format!(
                "expected tensor {name} {:?}, found {found} {shape:?}",
                t.shape()
            )));
        }
        for (dst, src) in t.data_mut().iter_mut().zip(data) {
            *dst = T::lit(src);
        }
    }
    Ok(())
}

fn named_mut<'m, T: Scalar>(names: Vec<String>, params: Vec<&'m mut Tensor<T>>) -> Vec<(String, &'m mut Tensor<T>)> {
    names.into_iter().zip(params).collect()
}

/// Decodes a model checkpoint, converting weights to `T`. When `vocab_hash` is given it
/// must match the hash recorded at save time.
pub fn model_from_bytes<T: Scalar>(bytes: &[u8], vocab_hash: Option<&str>) -> Result<(BiEncoderModel<T>, CheckpointMeta)> {
    let d = decode(bytes)?;
    let h = &d.header;
    if field(h, "kind")? != "model" {
        return Err(Error::CheckpointMalformed("not a model checkpoint".into()));
    }
    check_vocab(&d.vocab_hash, vocab_hash)?;
    let mechanism: Mechanism = parse(h, "mechanism")?;
    let flags = ModelFlags {
        use_attention: parse(h, "flags.use_attention")?,
        use_seeker: parse(h, "flags.use_seeker")?,
        use_rationales: parse(h, "flags.use_rationales")?,
    };
    let seeker = read_config(h, "seeker")?;
    let response = read_config(h, "response")?;
    let mut model = BiEncoderModel::<T>::new(mechanism, seeker, response, flags, 0)
        .map_err(|e| Error::CheckpointMalformed(e.to_string()))?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    fill(named_mut(names, model.params_mut()), d.tensors)?;
    Ok((model, read_meta(h)?))
}

pub fn encoder_from_bytes<T: Scalar>(bytes: &[u8], vocab_hash: Option<&str>) -> Result<(EncoderCheckpoint<T>, CheckpointMeta)> {
    let d = decode(bytes)?;
    let h = &d.header;
    if field(h, "kind")? != "encoder" {
        return Err(Error::CheckpointMalformed("not an encoder checkpoint".into()));
    }
    check_vocab(&d.vocab_hash, vocab_hash)?;
    let config = read_config(h, "encoder")?;
    let has_head: bool = parse(h, "has_head")?;
    let mut ckpt = EncoderCheckpoint {
        head: has_head.then(|| Linear::zeros(config.model_dim, config.vocab_size)),
        encoder: crate::encoder::init_params(&config, 0)?,
    };
    let mut names = Vec::new();
    ckpt.encoder.collect("encoder", &mut names);
    if let Some(head) = &ckpt.head {
        head.collect("mlm_head", &mut names);
    }
    let names: Vec<String> = names.into_iter().map(|(n, _)| n).collect();
    let mut params = ckpt.encoder.params_mut();
    if let Some(head) = &mut ckpt.head {
        params.extend(head.params_mut());
    }
    fill(named_mut(names, params), d.tensors)?;
    Ok((ckpt, read_meta(h)?))
}

/// Vocabulary hash recorded in a checkpoint, after integrity checks.
pub fn recorded_vocab_hash(bytes: &[u8]) -> Result<String> {
    Ok(decode(bytes)?.vocab_hash)
}

pub fn save_model<T: Scalar>(path: impl AsRef<Path>, model: &BiEncoderModel<T>, meta: &CheckpointMeta, vocab_hash: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_bytes(model, meta, vocab_hash)).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>, vocab_hash: Option<&str>) -> Result<(BiEncoderModel<T>, CheckpointMeta)> {
    let path = path.as_ref();
    model_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?, vocab_hash)
}

pub fn save_encoder<T: Scalar>(
    path: impl AsRef<Path>,
    ckpt: &EncoderCheckpoint<T>,
    meta: &CheckpointMeta,
    vocab_hash: &str,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encoder_to_bytes(ckpt, meta, vocab_hash)).map_err(|e| Error::io(path, e))
}

pub fn load_encoder<T: Scalar>(path: impl AsRef<Path>, vocab_hash: Option<&str>) -> Result<(EncoderCheckpoint<T>, CheckpointMeta)> {
    let path = path.as_ref();
    encoder_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?, vocab_hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> BiEncoderModel<f32> {
        let mut c = EncoderConfig::toy(30);
        c.num_layers = 1;
        c.model_dim = 8;
        c.ff_dim = 16;
        c.num_heads = 2;
        c.max_len = 12;
        BiEncoderModel::with_config(Mechanism::Interpretations, c, ModelFlags::default(), 4).unwrap()
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            epoch: 3,
            loss_curve: vec![1.25, 0.1 + 0.2, 1e-9],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = model();
        let a = model_to_bytes(&m, &meta(), "abc");
        let (back, meta_back) = model_from_bytes::<f32>(&a, Some("abc")).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta_back, meta());
        assert_eq!(model_to_bytes(&back, &meta_back, "abc"), a);
    }

    #[test]
    fn dtype_conversion() {
        let m = model();
        let bytes = model_to_bytes(&m, &meta(), "h");
        let (wide, _) = model_from_bytes::<f64>(&bytes, None).unwrap();
        assert_eq!(wide.cast::<f32>(), m);
    }

    #[test]
    fn damage_is_detected() {
        let bytes = model_to_bytes(&model(), &meta(), "h");
        assert!(matches!(model_from_bytes::<f32>(&bytes[..bytes.len() - 1], None), Err(Error::CheckpointTruncated)));
        assert!(matches!(model_from_bytes::<f32>(&bytes[..5], None), Err(Error::CheckpointTruncated)));
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(model_from_bytes::<f32>(&flipped, None), Err(Error::CheckpointCorrupt)));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(model_from_bytes::<f32>(&bad_magic, None), Err(Error::CheckpointMalformed(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(model_from_bytes::<f32>(&longer, None), Err(Error::CheckpointMalformed(_))));
    }

    #[test]
    fn version_checked_after_integrity() {
        let mut bytes = model_to_bytes(&model(), &meta(), "h");
        bytes[8] = 9;
        let n = bytes.len() - DIGEST;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&digest);
        assert!(matches!(
            model_from_bytes::<f32>(&bytes, None),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn vocab_mismatch() {
        let bytes = model_to_bytes(&model(), &meta(), "aaa");
        match model_from_bytes::<f32>(&bytes, Some("bbb")) {
            Err(Error::VocabMismatch { expected, found }) => assert_eq!((expected.as_str(), found.as_str()), ("aaa", "bbb")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn encoder_round_trip() {
        let m = model();
        let ckpt = EncoderCheckpoint {
            encoder: m.response_encoder.clone(),
            head: Some(Linear::zeros(8, 30)),
        };
        let bytes = encoder_to_bytes(&ckpt, &CheckpointMeta::default(), "v");
        let (back, _) = encoder_from_bytes::<f32>(&bytes, Some("v")).unwrap();
        assert_eq!(back, ckpt);
        assert!(model_from_bytes::<f32>(&bytes, None).is_err());
    }
}
