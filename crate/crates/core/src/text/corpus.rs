//! Annotated (seeker post, response post) pairs and their line-delimited file format.
//!
//! One record per line, eight tab-separated fields:
//!
//! ```text
//! seeker  response  er_level  er_spans  ip_level  ip_spans  ex_level  ex_spans
//! ```
//!
//! Span lists are `start-end` byte intervals into the response joined by `;`, empty when
//! there are none. Inside the two text fields `\` `TAB` `LF` `CR` are written as `\\`
//! `\t` `\n` `\r`. Empty lines are ignored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Level, Mechanism, Span};

/// Level and rationale spans of one mechanism.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub level: Level,
    pub spans: Vec<Span>,
}

impl Annotation {
    pub fn none() -> Self {
        Self {
            level: Level::None,
            spans: Vec::new(),
        }
    }

    pub fn new(level: Level, spans: Vec<Span>) -> Self {
        Self { level, spans }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedPair {
    pub seeker: String,
    pub response: String,
    /// Indexed by [`Mechanism::index`].
    pub annotations: [Annotation; 3],
}

impl AnnotatedPair {
    pub fn annotation(&self, m: Mechanism) -> &Annotation {
        &self.annotations[m.index()]
    }

    /// Checks span bounds/order and that level 0 carries no rationale.
    pub fn validate(&self) -> Result<()> {
        for m in Mechanism::ALL {
            let ann = self.annotation(m);
            validate_spans(&ann.spans, &self.response)
                .map_err(|reason| Error::validation(format!("{}_spans", m.code()), reason))?;
            if ann.level == Level::None && !ann.spans.is_empty() {
                return Err(Error::validation(
                    format!("{}_spans", m.code()),
                    "level 0 must not carry rationale spans",
                ));
            }
        }
        Ok(())
    }
}

/// Spans must be non-empty, sorted, non-overlapping, inside `text` and on char boundaries.
pub fn validate_spans(spans: &[Span], text: &str) -> std::result::Result<(), String> {
    let mut prev_end = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.start >= s.end {
            return Err(format!("span {s} is empty"));
        }
        if s.end > text.len() {
            return Err(format!("span {s} exceeds text length {}", text.len()));
        }
        if !text.is_char_boundary(s.start) || !text.is_char_boundary(s.end) {
            return Err(format!("span {s} splits a character"));
        }
        if i > 0 && s.start < prev_end {
            return Err(format!("span {s} overlaps or precedes the previous span"));
        }
        prev_end = s.end;
    }
    Ok(())
}

pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(o) => return Err(format!("unknown escape \\{o}")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

fn format_spans(spans: &[Span]) -> String {
    spans.iter().map(Span::to_string).collect::<Vec<_>>().join(";")
}

fn parse_spans(s: &str) -> std::result::Result<Vec<Span>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|part| {
            let (a, b) = part
                .split_once('-')
                .ok_or_else(|| format!("span {part:?} is not start-end"))?;
            let start = a.trim().parse().map_err(|_| format!("bad span start {a:?}"))?;
            let end = b.trim().parse().map_err(|_| format!("bad span end {b:?}"))?;
            Ok(Span::new(start, end))
        })
        .collect()
}

pub fn format_record(pair: &AnnotatedPair) -> String {
    let mut fields = vec![escape_field(&pair.seeker), escape_field(&pair.response)];
    for ann in &pair.annotations {
        fields.push(ann.level.to_string());
        fields.push(format_spans(&ann.spans));
    }
    fields.join("\t")
}

/// Parses one record; `line` and `source` only label errors.
pub fn parse_record(text: &str, source: &str, line: usize) -> Result<AnnotatedPair> {
    let parse_err = |reason: String| Error::Parse {
        path: source.to_string(),
        line,
        reason,
    };
    let fields: Vec<&str> = text.split('\t').collect();
    if fields.len() != 8 {
        return Err(parse_err(format!("expected 8 fields, found {}", fields.len())));
    }
    let seeker = unescape_field(fields[0]).map_err(|r| parse_err(format!("seeker: {r}")))?;
    let response = unescape_field(fields[1]).map_err(|r| parse_err(format!("response: {r}")))?;
    let mut annotations = std::array::from_fn(|_| Annotation::none());
    for m in Mechanism::ALL {
        let i = 2 + 2 * m.index();
        let level = fields[i].parse::<Level>().map_err(|e| {
            Error::validation(format!("{}_level", m.code()), format!("line {line}: {e}"))
        })?;
        let spans = parse_spans(fields[i + 1]).map_err(|r| {
            Error::validation(format!("{}_spans", m.code()), format!("line {line}: {r}"))
        })?;
        annotations[m.index()] = Annotation { level, spans };
    }
    let pair = AnnotatedPair {
        seeker,
        response,
        annotations,
    };
    pair.validate().map_err(|e| match e {
        Error::Validation { field, reason } => Error::Validation {
            field,
            reason: format!("line {line}: {reason}"),
        },
        other => other,
    })?;
    Ok(pair)
}

pub fn parse_corpus(text: &str, source: &str) -> Result<Vec<AnnotatedPair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_record(l.strip_suffix('\r').unwrap_or(l), source, i + 1))
        .collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<AnnotatedPair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string())
}

pub fn corpus_to_string(pairs: &[AnnotatedPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format_record(p));
        out.push('\n');
    }
    out
}

pub fn save_corpus(path: impl AsRef<Path>, pairs: &[AnnotatedPair]) -> Result<()> {
    for p in pairs {
        p.validate()?;
    }
    let path = path.as_ref();
    fs::write(path, corpus_to_string(pairs)).map_err(|e| Error::io(path, e))
}
