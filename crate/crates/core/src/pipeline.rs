//! Three per-mechanism models sharing one vocabulary, used for end-to-end inference.

use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{Level, Levels, Mechanism};
use crate::model::{BiEncoderModel, Prediction};
use crate::scalar::Scalar;
use crate::text::encode::{encode_text, TokenizedPair};
use crate::text::vocab::Vocabulary;
use crate::train::checkpoint::{file_digest, load_model};

/// Frames an unlabeled pair with each side truncated to its own encoder's `max_len`.
pub fn encode_for<T>(model: &BiEncoderModel<T>, vocab: &Vocabulary, seeker: &str, response: &str) -> Result<TokenizedPair> {
    let (seeker_ids, _) = encode_text(seeker, vocab, model.seeker_encoder.config.max_len)?;
    let (response_ids, response_offsets) = encode_text(response, vocab, model.response_encoder.config.max_len)?;
    Ok(TokenizedPair {
        seeker_ids,
        response_ids,
        response_offsets,
        targets: None,
    })
}

/// Assigns the three levels to a (seeker, response) pair.
pub trait Annotator: Sync {
    fn levels(&self, seeker: &str, response: &str) -> Result<Levels>;
}

#[derive(Debug, Clone)]
pub struct Pipeline<T> {
    vocab: Vocabulary,
    models: [BiEncoderModel<T>; 3],
    checkpoint_hashes: Vec<String>,
}

impl<T: Scalar> Pipeline<T> {
    /// `models` must contain each mechanism once, in any order.
    pub fn new(vocab: Vocabulary, models: Vec<BiEncoderModel<T>>) -> Result<Self> {
        let mut slots: [Option<BiEncoderModel<T>>; 3] = Default::default();
        for m in models {
            m.validate()?;
            for enc in [&m.seeker_encoder, &m.response_encoder] {
                if enc.config.vocab_size != vocab.len() {
                    return Err(Error::Config(format!(
                        "{} model expects {} tokens, vocabulary has {}",
                        m.mechanism.code(),
                        enc.config.vocab_size,
                        vocab.len()
                    )));
                }
            }
            let i = m.mechanism.index();
            if slots[i].replace(m).is_some() {
                return Err(Error::Config(format!("two models for {}", Mechanism::ALL[i].code())));
            }
        }
        let mut out = Vec::with_capacity(3);
        for (i, s) in slots.into_iter().enumerate() {
            out.push(s.ok_or(Error::MissingMechanism(Mechanism::ALL[i].name()))?);
        }
        Ok(Self {
            vocab,
            models: out.try_into().unwrap_or_else(|_| unreachable!()),
            checkpoint_hashes: Vec::new(),
        })
    }

    /// Loads a vocabulary and three checkpoints recorded against it.
    pub fn load(vocab_path: impl AsRef<Path>, checkpoints: &[impl AsRef<Path>]) -> Result<Self> {
        let vocab = Vocabulary::load(vocab_path)?;
        let hash = vocab.hash();
        let mut models = Vec::with_capacity(checkpoints.len());
        let mut hashes = Vec::with_capacity(checkpoints.len());
        for path in checkpoints {
            models.push(load_model::<T>(path, Some(&hash))?.0);
            hashes.push(file_digest(path)?);
        }
        let mut p = Self::new(vocab, models)?;
        p.checkpoint_hashes = hashes;
        Ok(p)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn model(&self, m: Mechanism) -> &BiEncoderModel<T> {
        &self.models[m.index()]
    }

    /// SHA-256 of each checkpoint file, in load order. Empty when built in memory.
    pub fn checkpoint_hashes(&self) -> &[String] {
        &self.checkpoint_hashes
    }

    /// Predictions in ER, IP, EX order.
    pub fn predict(&self, seeker: &str, response: &str) -> Result<Vec<Prediction>> {
        self.models
            .iter()
            .map(|m| m.predict(&encode_for(m, &self.vocab, seeker, response)?))
            .collect()
    }
}

impl<T: Scalar> Annotator for Pipeline<T> {
    fn levels(&self, seeker: &str, response: &str) -> Result<Levels> {
        let preds = self.predict(seeker, response)?;
        let mut out = [Level::None; 3];
        for p in preds {
            out[p.mechanism.index()] = p.level;
        }
        Ok(out)
    }
}
