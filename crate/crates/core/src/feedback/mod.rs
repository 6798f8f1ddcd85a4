//! Total empathy score and templated writing feedback.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Level, Levels, Mechanism, Span};
use crate::model::Prediction;

/// Reports at or below this total are flagged for a rewrite.
pub const REWRITE_THRESHOLD: u8 = 1;

const DEFAULT_TEMPLATES: &str = include_str!("default_templates.tsv");

/// Sum of three levels given as raw integers.
pub fn total_score(levels: [u8; 3]) -> Result<u8> {
    let mut total = 0;
    for v in levels {
        total += Level::try_from(v)? as u8;
    }
    Ok(total)
}

pub fn total_of(levels: &Levels) -> u8 {
    levels.iter().map(|&l| l as u8).sum()
}

/// Message templates for every (mechanism, level) cell plus the exemplar banks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackTemplateSet {
    templates: [[String; 3]; 3],
    exemplars: [Vec<String>; 3],
    lacks: [String; 3],
    combined: String,
}

impl Default for FeedbackTemplateSet {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }
}

fn check_slots(text: &str, allowed: &[&str], line: usize) -> Result<()> {
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| parse_err(line, "unclosed slot"))?;
        let slot = &rest[open + 1..open + close];
        if !allowed.contains(&slot) {
            return Err(parse_err(line, &format!("unknown slot {{{slot}}}")));
        }
        rest = &rest[open + close + 1..];
    }
    Ok(())
}

fn parse_err(line: usize, reason: &str) -> Error {
    Error::Parse {
        path: "<templates>".into(),
        line,
        reason: reason.into(),
    }
}

impl FeedbackTemplateSet {
    /// Parses `mechanism \t kind \t text` lines. `kind` is a level (0/1/2), `exemplar`
    /// or `lack`; the combined item uses `* \t combined \t text`. `#` starts a comment.
    pub fn parse(src: &str) -> Result<Self> {
        let mut templates: [[Option<String>; 3]; 3] = Default::default();
        let mut exemplars: [Vec<String>; 3] = Default::default();
        let mut lacks: [Option<String>; 3] = Default::default();
        let mut combined = None;
        for (i, raw) in src.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let mut fields = raw.splitn(3, '\t');
            let (Some(mech), Some(kind), Some(text)) = (fields.next(), fields.next(), fields.next()) else {
                return Err(parse_err(line, "expected three tab-separated fields"));
            };
            let text = text.trim().to_string();
            if text.is_empty() {
                return Err(parse_err(line, "empty text"));
            }
            if mech.trim() == "*" {
                if kind.trim() != "combined" {
                    return Err(parse_err(line, "only `combined` may use `*`"));
                }
                check_slots(&text, &["missing", "exemplars"], line)?;
                combined = Some(text);
                continue;
            }
            let m: Mechanism = mech.parse().map_err(|_| parse_err(line, &format!("unknown mechanism {mech:?}")))?;
            match kind.trim() {
                "exemplar" => {
                    check_slots(&text, &[], line)?;
                    exemplars[m.index()].push(text);
                }
                "lack" => {
                    check_slots(&text, &[], line)?;
                    lacks[m.index()] = Some(text);
                }
                level => {
                    let l: Level = level.parse().map_err(|_| parse_err(line, &format!("unknown kind {level:?}")))?;
                    check_slots(&text, &["rationale", "exemplars"], line)?;
                    templates[m.index()][l.index()] = Some(text);
                }
            }
        }
        let missing = |what: String| Error::Config(format!("template set has no {what}"));
        let mut out_templates: [[String; 3]; 3] = Default::default();
        for m in Mechanism::ALL {
            for l in Level::ALL {
                out_templates[m.index()][l.index()] = templates[m.index()][l.index()]
                    .take()
                    .ok_or_else(|| missing(format!("template for {} level {}", m.code(), l)))?;
            }
            if exemplars[m.index()].is_empty() {
                return Err(missing(format!("exemplars for {}", m.code())));
            }
        }
        let mut out_lacks: [String; 3] = Default::default();
        for m in Mechanism::ALL {
            out_lacks[m.index()] = lacks[m.index()]
                .take()
                .ok_or_else(|| missing(format!("lack phrase for {}", m.code())))?;
        }
        Ok(Self {
            templates: out_templates,
            exemplars,
            lacks: out_lacks,
            combined: combined.ok_or_else(|| missing("combined template".into()))?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&src).map_err(|e| match e {
            Error::Parse { line, reason, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                reason,
            },
            other => other,
        })
    }

    pub fn template(&self, m: Mechanism, l: Level) -> &str {
        &self.templates[m.index()][l.index()]
    }

    pub fn exemplars(&self, m: Mechanism) -> &[String] {
        &self.exemplars[m.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Affirm,
    Strengthen,
    Lacking,
}

/// A verbatim piece of the response cited by an item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    pub span: Span,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackItem {
    pub kind: ItemKind,
    pub mechanisms: Vec<Mechanism>,
    pub text: String,
    pub quotes: Vec<Quote>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Highlight {
    pub mechanism: Mechanism,
    pub level: Level,
    pub span: Span,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MechanismResult {
    pub mechanism: Mechanism,
    pub level: Level,
    pub spans: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub response: String,
    /// ER, IP, EX.
    pub mechanisms: Vec<MechanismResult>,
    pub total_score: u8,
    pub offer_rewrite: bool,
    pub items: Vec<FeedbackItem>,
    /// Rationale spans over the response, sorted by start offset then mechanism.
    pub highlights: Vec<Highlight>,
}

impl FeedbackReport {
    pub fn levels(&self) -> Levels {
        let mut out = [Level::None; 3];
        for r in &self.mechanisms {
            out[r.mechanism.index()] = r.level;
        }
        out
    }
}

pub fn score_delta(before: &FeedbackReport, after: &FeedbackReport) -> i32 {
    after.total_score as i32 - before.total_score as i32
}

fn curly(s: &str) -> String {
    format!("\u{201c}{s}\u{201d}")
}

fn join_list(items: &[String], last_sep: &str) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{}{last_sep}{last}", init.join(", ")),
    }
}

fn rationale_phrase(quotes: &[Quote]) -> String {
    let quoted: Vec<String> = quotes.iter().map(|q| curly(&q.text)).collect();
    match quoted.len() {
        0 => "parts of the response".into(),
        1 => format!("the portion {}", quoted[0]),
        _ => format!("the portions {}", join_list(&quoted, " and ")),
    }
}

fn exemplar_phrase(phrases: &[String]) -> String {
    let quoted: Vec<String> = phrases.iter().map(|p| curly(p)).collect();
    join_list(&quoted, " or ")
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in slots {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Builds the report for one response from its three per-mechanism predictions.
pub fn generate_feedback(response: &str, predictions: &[Prediction], templates: &FeedbackTemplateSet) -> Result<FeedbackReport> {
    let mut by_mech: [Option<&Prediction>; 3] = [None; 3];
    for p in predictions {
        if by_mech[p.mechanism.index()].replace(p).is_some() {
            return Err(Error::validation("predictions", format!("{} given twice", p.mechanism.code())));
        }
    }
    let mut preds = Vec::with_capacity(3);
    for m in Mechanism::ALL {
        preds.push(by_mech[m.index()].ok_or(Error::MissingMechanism(m.name()))?);
    }

    let mut mechanisms = Vec::with_capacity(3);
    let mut quotes: Vec<Vec<Quote>> = Vec::with_capacity(3);
    let mut highlights = Vec::new();
    for p in &preds {
        let mut qs = Vec::with_capacity(p.rationale_spans.len());
        for &span in &p.rationale_spans {
            let text = span.slice(response).ok_or_else(|| {
                Error::validation("rationale_spans", format!("span {span} does not index the response"))
            })?;
            qs.push(Quote {
                span,
                text: text.to_string(),
            });
            highlights.push(Highlight {
                mechanism: p.mechanism,
                level: p.level,
                span,
                text: text.to_string(),
            });
        }
        mechanisms.push(MechanismResult {
            mechanism: p.mechanism,
            level: p.level,
            spans: p.rationale_spans.clone(),
        });
        quotes.push(qs);
    }
    highlights.sort_by_key(|h| (h.span.start, h.mechanism));

    let mut items = Vec::new();
    let lacking: Vec<Mechanism> = Mechanism::ALL
        .into_iter()
        .filter(|m| preds[m.index()].level == Level::None)
        .collect();
    for m in Mechanism::ALL {
        let level = preds[m.index()].level;
        if level == Level::None {
            continue;
        }
        let qs = quotes[m.index()].clone();
        let text = fill(
            templates.template(m, level),
            &[
                ("rationale", &rationale_phrase(&qs)),
                ("exemplars", &exemplar_phrase(templates.exemplars(m))),
            ],
        );
        let kind = if level == Level::Strong {
            ItemKind::Affirm
        } else {
            ItemKind::Strengthen
        };
        items.push(FeedbackItem {
            kind,
            mechanisms: vec![m],
            text,
            quotes: qs,
        });
    }
    match lacking.as_slice() {
        [] => {}
        [m] => items.push(FeedbackItem {
            kind: ItemKind::Lacking,
            mechanisms: vec![*m],
            text: fill(
                templates.template(*m, Level::None),
                &[
                    ("rationale", "the response"),
                    ("exemplars", &exemplar_phrase(templates.exemplars(*m))),
                ],
            ),
            quotes: Vec::new(),
        }),
        many => {
            let missing: Vec<String> = many.iter().map(|m| templates.lacks[m.index()].clone()).collect();
            let examples: Vec<String> = many.iter().map(|m| templates.exemplars(*m)[0].clone()).collect();
            items.push(FeedbackItem {
                kind: ItemKind::Lacking,
                mechanisms: many.to_vec(),
                text: fill(
                    &templates.combined,
                    &[
                        ("missing", &join_list(&missing, " or ")),
                        ("exemplars", &exemplar_phrase(&examples)),
                    ],
                ),
                quotes: Vec::new(),
            });
        }
    }

    let total = preds.iter().map(|p| p.level as u8).sum();
    Ok(FeedbackReport {
        response: response.to_string(),
        mechanisms,
        total_score: total,
        offer_rewrite: total <= REWRITE_THRESHOLD,
        items,
        highlights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(m: Mechanism, level: Level, spans: Vec<Span>) -> Prediction {
        Prediction {
            mechanism: m,
            level,
            level_probs: [0.0; 3],
            rationale_mask: Vec::new(),
            rationale_spans: spans,
        }
    }

    fn preds(levels: [Level; 3]) -> Vec<Prediction> {
        Mechanism::ALL.iter().map(|&m| pred(m, levels[m.index()], vec![])).collect()
    }

    #[test]
    fn total_scores() {
        assert_eq!(total_score([0, 0, 0]).unwrap(), 0);
        assert_eq!(total_score([2, 2, 2]).unwrap(), 6);
        assert_eq!(total_score([1, 2, 0]).unwrap(), 3);
        assert!(total_score([3, 0, 0]).is_err());
    }

    #[test]
    fn bundled_templates_cover_every_cell() {
        let t = FeedbackTemplateSet::default();
        for m in Mechanism::ALL {
            for l in Level::ALL {
                assert!(!t.template(m, l).is_empty());
            }
        }
    }

    #[test]
    fn all_strong_gives_three_affirmations() {
        let r = generate_feedback("x", &preds([Level::Strong; 3]), &FeedbackTemplateSet::default()).unwrap();
        assert_eq!(r.total_score, 6);
        assert!(!r.offer_rewrite);
        assert_eq!(r.items.len(), 3);
        assert!(r.items.iter().all(|i| i.kind == ItemKind::Affirm));
    }

    #[test]
    fn all_none_gives_one_combined_item() {
        let r = generate_feedback("x", &preds([Level::None; 3]), &FeedbackTemplateSet::default()).unwrap();
        assert_eq!(r.items.len(), 1);
        assert_eq!(r.items[0].mechanisms, Mechanism::ALL.to_vec());
        assert!(r.offer_rewrite);
    }

    #[test]
    fn single_lack_uses_its_own_template() {
        let r = generate_feedback(
            "x",
            &preds([Level::Strong, Level::Weak, Level::None]),
            &FeedbackTemplateSet::default(),
        )
        .unwrap();
        let kinds: Vec<_> = r.items.iter().map(|i| i.kind).collect();
        assert_eq!(kinds, [ItemKind::Affirm, ItemKind::Strengthen, ItemKind::Lacking]);
        assert!(r.items[2].text.contains("Are you feeling alone right now?"));
    }

    #[test]
    fn missing_and_duplicate_mechanisms() {
        let t = FeedbackTemplateSet::default();
        let mut p = preds([Level::None; 3]);
        p.pop();
        assert!(matches!(generate_feedback("x", &p, &t), Err(Error::MissingMechanism("explorations"))));
        p.push(p[0].clone());
        assert!(generate_feedback("x", &p, &t).is_err());
    }

    #[test]
    fn out_of_range_span_rejected() {
        let mut p = preds([Level::Weak; 3]);
        p[0].rationale_spans = vec![Span { start: 0, end: 10 }];
        assert!(generate_feedback("short", &p, &FeedbackTemplateSet::default()).is_err());
    }

    #[test]
    fn template_parse_errors() {
        let good = DEFAULT_TEMPLATES;
        assert!(FeedbackTemplateSet::parse(good).is_ok());
        let no_cell: String = good.lines().filter(|l| !l.starts_with("ip\t1")).map(|l| format!("{l}\n")).collect();
        assert!(matches!(FeedbackTemplateSet::parse(&no_cell), Err(Error::Config(_))));
        let bad_slot = format!("{good}er\t2\tNice {{quote}}\n");
        assert!(matches!(FeedbackTemplateSet::parse(&bad_slot), Err(Error::Parse { .. })));
        let bad_level = format!("{good}er\t5\tx\n");
        assert!(matches!(FeedbackTemplateSet::parse(&bad_level), Err(Error::Parse { line: 22, .. })));
    }
}
