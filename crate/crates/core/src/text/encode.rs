use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Level, Mechanism, Span};
use crate::metrics::extract_spans;
use crate::text::corpus::{validate_spans, AnnotatedPair};
use crate::text::tokenizer::tokenize;
use crate::text::vocab::{Vocabulary, CLS_ID, PAD_ID, SEP_ID};

/// Gold level and per-token rationale mask of one mechanism.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleTarget {
    pub level: Level,
    /// One entry per kept response token (excludes `[CLS]`/`[SEP]`/`[PAD]`).
    pub mask: Vec<bool>,
}

/// Model input for one pair. Both id sequences are `[CLS] tokens [SEP]` padded to
/// `max_len`; position `j + 1` of `response_ids` is response token `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedPair {
    pub seeker_ids: Vec<usize>,
    pub response_ids: Vec<usize>,
    /// Byte intervals of the kept response tokens.
    pub response_offsets: Vec<Span>,
    /// Present for annotated pairs, indexed by [`Mechanism::index`].
    pub targets: Option<[RationaleTarget; 3]>,
}

impl TokenizedPair {
    pub fn target(&self, m: Mechanism) -> Option<&RationaleTarget> {
        self.targets.as_ref().map(|t| &t[m.index()])
    }

    pub fn response_token_count(&self) -> usize {
        self.response_offsets.len()
    }

    /// Non-padding prefix of the seeker ids.
    pub fn seeker_unpadded(&self) -> &[usize] {
        unpadded(&self.seeker_ids)
    }

    pub fn response_unpadded(&self) -> &[usize] {
        unpadded(&self.response_ids)
    }
}

fn unpadded(ids: &[usize]) -> &[usize] {
    let n = ids.iter().position(|&i| i == PAD_ID).unwrap_or(ids.len());
    &ids[..n]
}

/// Frames `text` as `[CLS] tokens [SEP]`, truncated and padded to `max_len`. Returns the
/// ids and the byte intervals of the kept tokens.
pub fn encode_text(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<(Vec<usize>, Vec<Span>)> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len must be at least 3, got {max_len}")));
    }
    let mut tokens = tokenize(text);
    tokens.truncate(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(tokens.iter().map(|t| vocab.id(&t.text)));
    ids.push(SEP_ID);
    ids.resize(max_len, PAD_ID);
    Ok((ids, tokens.into_iter().map(|t| t.span).collect()))
}

/// Encodes an unannotated pair for inference.
pub fn encode_texts(seeker: &str, response: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenizedPair> {
    let (seeker_ids, _) = encode_text(seeker, vocab, max_len)?;
    let (response_ids, response_offsets) = encode_text(response, vocab, max_len)?;
    Ok(TokenizedPair {
        seeker_ids,
        response_ids,
        response_offsets,
        targets: None,
    })
}

pub fn encode_pair(pair: &AnnotatedPair, vocab: &Vocabulary, max_len: usize) -> Result<TokenizedPair> {
    let mut tp = encode_texts(&pair.seeker, &pair.response, vocab, max_len)?;
    let mut targets = Vec::with_capacity(3);
    for m in Mechanism::ALL {
        let ann = pair.annotation(m);
        let mask = align_spans_to_mask(&ann.spans, &tp.response_offsets, pair.response.len())?;
        targets.push(RationaleTarget {
            level: ann.level,
            mask,
        });
    }
    tp.targets = Some(targets.try_into().expect("three mechanisms"));
    Ok(tp)
}

/// Marks token `j` iff its interval overlaps some span by at least one byte.
pub fn align_spans_to_mask(spans: &[Span], offsets: &[Span], text_len: usize) -> Result<Vec<bool>> {
    let mut prev_end = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.start >= s.end || s.end > text_len || (i > 0 && s.start < prev_end) {
            return Err(Error::validation(
                "spans",
                format!("span {s} is empty, out of bounds or overlapping"),
            ));
        }
        prev_end = s.end;
    }
    Ok(offsets
        .iter()
        .map(|tok| spans.iter().any(|s| s.overlaps(tok)))
        .collect())
}

/// Maps maximal runs of marked tokens back to byte intervals.
pub fn mask_to_spans(mask: &[bool], offsets: &[Span]) -> Vec<Span> {
    extract_spans(mask)
        .into_iter()
        .map(|run| Span::new(offsets[run.start].start, offsets[run.end - 1].end))
        .collect()
}

/// Like [`align_spans_to_mask`] but validates spans against the text itself.
pub fn spans_to_mask(spans: &[Span], text: &str, offsets: &[Span]) -> Result<Vec<bool>> {
    validate_spans(spans, text).map_err(|r| Error::validation("spans", r))?;
    align_spans_to_mask(spans, offsets, text.len())
}
