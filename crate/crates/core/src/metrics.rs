//! Identification and rationale metrics, plus Cohen's kappa for annotator agreement.
//!
//! All metrics are generic over [`MetricValue`] so they can be evaluated exactly over
//! rationals as well as in floating point.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Level, Span};
use crate::model::{BiEncoderModel, Prediction};
use crate::scalar::{MetricValue, Scalar};
use crate::text::encode::TokenizedPair;

/// Default IOU threshold for a span to count as matched.
pub const IOU_THRESHOLD: f64 = 0.5;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("prediction/gold lengths differ: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::Empty("no examples"));
    }
    Ok(())
}

fn f1_from_counts<V: MetricValue>(tp: usize, fp: usize, fn_: usize) -> V {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return V::one();
    }
    V::count(2 * tp) / V::count(denom)
}

pub fn accuracy<V: MetricValue>(pred: &[Level], gold: &[Level]) -> Result<V> {
    check_lengths(pred.len(), gold.len())?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(V::count(hits) / V::count(gold.len()))
}

/// One-vs-rest F1 for each level; a class without true positives scores 0.
pub fn per_class_f1<V: MetricValue>(pred: &[Level], gold: &[Level]) -> Result<[V; 3]> {
    check_lengths(pred.len(), gold.len())?;
    let mut out = [V::zero(), V::zero(), V::zero()];
    for class in Level::ALL {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for (&p, &g) in pred.iter().zip(gold) {
            match (p == class, g == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp > 0 {
            out[class.index()] = f1_from_counts(tp, fp, fn_);
        }
    }
    Ok(out)
}

/// Unweighted mean of the three per-class F1 scores.
pub fn macro_f1<V: MetricValue>(pred: &[Level], gold: &[Level]) -> Result<V> {
    let [a, b, c] = per_class_f1::<V>(pred, gold)?;
    Ok((a + b + c) / V::count(3))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn f1<V: MetricValue>(&self) -> V {
        f1_from_counts(self.tp, self.fp, self.fn_)
    }

    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

pub fn token_counts(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<Counts> {
    if pred.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predicted masks for {} gold masks",
            pred.len(),
            gold.len()
        )));
    }
    let mut c = Counts::default();
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Shape(format!(
                "example {i}: mask lengths differ ({} vs {})",
                p.len(),
                g.len()
            )));
        }
        for (&pi, &gi) in p.iter().zip(g) {
            match (pi, gi) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
    }
    Ok(c)
}

/// Micro-averaged F1 of the rationale class over all tokens. Both sides all-negative
/// scores 1.
pub fn token_f1<V: MetricValue>(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<V> {
    Ok(token_counts(pred, gold)?.f1())
}

/// Maximal runs of `true`, as half-open token intervals.
pub fn extract_spans(mask: &[bool]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push(Span::new(s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(Span::new(s, mask.len()));
    }
    spans
}

pub fn iou<V: MetricValue>(a: Span, b: Span) -> V {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return V::zero();
    }
    V::count(inter) / V::count(union)
}

/// Greedy one-to-one matching in descending IOU order (ties by pred then gold index);
/// a match is a true positive iff its IOU reaches `threshold`.
pub fn match_spans<V: MetricValue>(pred: &[Span], gold: &[Span], threshold: &V) -> Counts {
    let mut pairs: Vec<(V, usize, usize)> = Vec::new();
    for (i, &p) in pred.iter().enumerate() {
        for (j, &g) in gold.iter().enumerate() {
            let v: V = iou(p, g);
            if v > V::zero() {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut pred_used = vec![false; pred.len()];
    let mut gold_used = vec![false; gold.len()];
    let mut tp = 0;
    for (v, i, j) in pairs {
        if pred_used[i] || gold_used[j] {
            continue;
        }
        pred_used[i] = true;
        gold_used[j] = true;
        if v >= *threshold {
            tp += 1;
        }
    }
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
    }
}

pub fn span_counts<V: MetricValue>(pred: &[Vec<Span>], gold: &[Vec<Span>], threshold: &V) -> Result<Counts> {
    if pred.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predicted span lists for {} gold lists",
            pred.len(),
            gold.len()
        )));
    }
    let mut c = Counts::default();
    for (p, g) in pred.iter().zip(gold) {
        c.add(match_spans(p, g, threshold));
    }
    Ok(c)
}

/// Span-level F1 with counts summed over the corpus. No spans on either side scores 1.
pub fn iou_f1<V: MetricValue>(pred: &[Vec<Span>], gold: &[Vec<Span>], threshold: &V) -> Result<V> {
    Ok(span_counts(pred, gold, threshold)?.f1())
}

/// Cohen's kappa between two raters. Undefined when chance agreement is 1.
pub fn cohen_kappa<V: MetricValue, L: Ord + Clone>(a: &[L], b: &[L]) -> Result<V> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("rater lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Undefined("kappa needs at least two items"));
    }
    let n = V::count(a.len());
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count();
    let p_o = V::count(agree) / n.clone();
    let mut marg: BTreeMap<&L, (usize, usize)> = BTreeMap::new();
    for x in a {
        marg.entry(x).or_default().0 += 1;
    }
    for y in b {
        marg.entry(y).or_default().1 += 1;
    }
    let mut p_e = V::zero();
    for (ca, cb) in marg.values() {
        p_e = p_e + (V::count(*ca) / n.clone()) * (V::count(*cb) / n.clone());
    }
    if p_e == V::one() {
        return Err(Error::Undefined("chance agreement is 1 (degenerate marginals)"));
    }
    Ok((p_o - p_e.clone()) / (V::one() - p_e))
}

/// Fraction of matching mask entries over all examples; 1 when there are no tokens.
pub fn token_accuracy(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Shape(format!("{} predicted masks for {} gold", pred.len(), gold.len())));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(Error::Shape(format!("mask lengths {} and {}", p.len(), g.len())));
        }
        hit += p.iter().zip(g).filter(|(a, b)| a == b).count();
        total += g.len();
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

/// Identification and rationale metrics for one mechanism over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: [f64; 3],
    pub token_f1: f64,
    /// Fraction of response tokens whose rationale bit is predicted correctly.
    pub token_accuracy: f64,
    pub iou_f1: f64,
    pub support: [usize; 3],
    pub token_counts: Counts,
    pub span_counts: Counts,
}

impl MetricReport {
    pub fn from_predictions(
        pred_levels: &[Level],
        gold_levels: &[Level],
        pred_masks: &[Vec<bool>],
        gold_masks: &[Vec<bool>],
    ) -> Result<Self> {
        let per_class_f1 = per_class_f1::<f64>(pred_levels, gold_levels)?;
        let mut support = [0; 3];
        for g in gold_levels {
            support[g.index()] += 1;
        }
        let token_counts = token_counts(pred_masks, gold_masks)?;
        let pred_spans: Vec<_> = pred_masks.iter().map(|m| extract_spans(m)).collect();
        let gold_spans: Vec<_> = gold_masks.iter().map(|m| extract_spans(m)).collect();
        let span_counts = span_counts(&pred_spans, &gold_spans, &IOU_THRESHOLD)?;
        Ok(Self {
            accuracy: accuracy(pred_levels, gold_levels)?,
            macro_f1: per_class_f1.iter().sum::<f64>() / 3.0,
            per_class_f1,
            token_f1: token_counts.f1(),
            token_accuracy: token_accuracy(pred_masks, gold_masks)?,
            iou_f1: span_counts.f1(),
            support,
            token_counts,
            span_counts,
        })
    }

    /// `key = value` lines, reals with four decimals.
    pub fn to_canonical_text(&self) -> String {
        self.to_string()
    }
}

/// Runs the model over `data` and scores it against the gold labels for its mechanism.
pub fn evaluate<T: Scalar>(model: &BiEncoderModel<T>, data: &[TokenizedPair]) -> Result<MetricReport> {
    let preds: Vec<Prediction> = data.par_iter().map(|p| model.predict(p)).collect::<Result<_>>()?;
    let mut gold_levels = Vec::with_capacity(data.len());
    let mut gold_masks = Vec::with_capacity(data.len());
    for (i, pair) in data.iter().enumerate() {
        let t = pair
            .target(model.mechanism)
            .ok_or_else(|| Error::validation("dataset", format!("pair {i} carries no gold labels")))?;
        gold_levels.push(t.level);
        gold_masks.push(t.mask.clone());
    }
    let pred_levels: Vec<Level> = preds.iter().map(|p| p.level).collect();
    let pred_masks: Vec<Vec<bool>> = preds.into_iter().map(|p| p.rationale_mask).collect();
    MetricReport::from_predictions(&pred_levels, &gold_levels, &pred_masks, &gold_masks)
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy = {:.4}", self.accuracy)?;
        writeln!(f, "macro_f1 = {:.4}", self.macro_f1)?;
        for (i, v) in self.per_class_f1.iter().enumerate() {
            writeln!(f, "f1_level{i} = {v:.4}")?;
        }
        writeln!(f, "token_f1 = {:.4}", self.token_f1)?;
        writeln!(f, "token_accuracy = {:.4}", self.token_accuracy)?;
        writeln!(f, "iou_f1 = {:.4}", self.iou_f1)?;
        for (i, s) in self.support.iter().enumerate() {
            writeln!(f, "support_level{i} = {s}")?;
        }
        writeln!(f, "token_tp = {}", self.token_counts.tp)?;
        writeln!(f, "token_fp = {}", self.token_counts.fp)?;
        writeln!(f, "token_fn = {}", self.token_counts.fn_)?;
        writeln!(f, "span_tp = {}", self.span_counts.tp)?;
        writeln!(f, "span_fp = {}", self.span_counts.fp)?;
        writeln!(f, "span_fn = {}", self.span_counts.fn_)
    }
}
