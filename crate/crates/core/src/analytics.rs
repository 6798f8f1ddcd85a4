//! Aggregates over platform interaction logs.
//!
//! Log lines are tab-separated, in this field order:
//!
//! ```text
//! interaction_id  seeker_id  responder_id  timestamp  seeker_liked  reply_count
//! followed_within_24h  seeker_gender  responder_gender  er  ip  ex  [seeker_text  response_text]
//! ```
//! Booleans are `0`/`1`, timestamps are UTC seconds. Optional fields (genders, levels,
//! texts) may be empty. Texts use the corpus escaping (`\t`, `\n`, `\\`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Datelike};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Level, Levels};
use crate::pipeline::Annotator;
use crate::text::corpus::{escape_field, unescape_field};

const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub interaction_id: String,
    pub seeker_id: String,
    pub responder_id: String,
    /// UTC seconds.
    pub timestamp: i64,
    pub seeker_liked: bool,
    pub reply_count: u32,
    pub followed_within_24h: bool,
    pub seeker_gender: Option<String>,
    pub responder_gender: Option<String>,
    pub levels: Option<Levels>,
    pub seeker_text: Option<String>,
    pub response_text: Option<String>,
}

impl InteractionRecord {
    pub fn total_score(&self) -> Option<u8> {
        self.levels.map(|l| crate::feedback::total_of(&l))
    }

    /// Calendar year in UTC.
    pub fn year(&self) -> i32 {
        DateTime::from_timestamp(self.timestamp, 0)
            .map(|d| d.year())
            .unwrap_or(i32::MIN)
    }
}

fn opt(s: &str) -> Option<String> {
    (!s.is_empty()).then(|| s.to_string())
}

fn flag(s: &str, field: &str, line: usize) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::validation(field, format!("line {line}: expected 0 or 1, got {s:?}"))),
    }
}

pub fn parse_record(line: &str, line_no: usize) -> Result<InteractionRecord> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 12 && f.len() != 14 {
        return Err(Error::Parse {
            path: "<log>".into(),
            line: line_no,
            reason: format!("expected 12 or 14 fields, found {}", f.len()),
        });
    }
    let timestamp: i64 = f[3]
        .parse()
        .map_err(|_| Error::validation("timestamp", format!("line {line_no}: {:?} is not an integer", f[3])))?;
    if timestamp <= 0 {
        return Err(Error::validation("timestamp", format!("line {line_no}: must be positive")));
    }
    let reply_count = f[5]
        .parse()
        .map_err(|_| Error::validation("reply_count", format!("line {line_no}: {:?} is not a count", f[5])))?;
    let levels = match (f[9], f[10], f[11]) {
        ("", "", "") => None,
        (a, b, c) => {
            let lv = |s: &str, name: &str| {
                s.parse::<Level>()
                    .map_err(|_| Error::validation(name, format!("line {line_no}: {s:?} is not a level")))
            };
            Some([lv(a, "er")?, lv(b, "ip")?, lv(c, "ex")?])
        }
    };
    let text = |i: usize, name: &str| -> Result<Option<String>> {
        match f.get(i) {
            None | Some(&"") => Ok(None),
            Some(s) => unescape_field(s)
                .map(Some)
                .map_err(|e| Error::validation(name, format!("line {line_no}: {e}"))),
        }
    };
    Ok(InteractionRecord {
        interaction_id: f[0].to_string(),
        seeker_id: f[1].to_string(),
        responder_id: f[2].to_string(),
        timestamp,
        seeker_liked: flag(f[4], "seeker_liked", line_no)?,
        reply_count,
        followed_within_24h: flag(f[6], "followed_within_24h", line_no)?,
        seeker_gender: opt(f[7]),
        responder_gender: opt(f[8]),
        levels,
        seeker_text: text(12, "seeker_text")?,
        response_text: text(13, "response_text")?,
    })
}

pub fn format_record(r: &InteractionRecord) -> String {
    let b = |v: bool| if v { "1" } else { "0" };
    let levels = match r.levels {
        Some(l) => l.map(|x| x.to_string()),
        None => Default::default(),
    };
    let mut fields = vec![
        r.interaction_id.clone(),
        r.seeker_id.clone(),
        r.responder_id.clone(),
        r.timestamp.to_string(),
        b(r.seeker_liked).into(),
        r.reply_count.to_string(),
        b(r.followed_within_24h).into(),
        r.seeker_gender.clone().unwrap_or_default(),
        r.responder_gender.clone().unwrap_or_default(),
    ];
    fields.extend(levels);
    if r.seeker_text.is_some() || r.response_text.is_some() {
        fields.push(r.seeker_text.as_deref().map(escape_field).unwrap_or_default());
        fields.push(r.response_text.as_deref().map(escape_field).unwrap_or_default());
    }
    fields.join("\t")
}

pub fn parse_log(src: &str) -> Result<Vec<InteractionRecord>> {
    src.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, i + 1))
        .collect()
}

pub fn load_log(path: impl AsRef<Path>) -> Result<Vec<InteractionRecord>> {
    let path = path.as_ref();
    let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&src).map_err(|e| match e {
        Error::Parse { line, reason, .. } => Error::Parse {
            path: path.display().to_string(),
            line,
            reason,
        },
        other => other,
    })
}

pub fn log_to_string(records: &[InteractionRecord]) -> String {
    records.iter().map(|r| format_record(r) + "\n").collect()
}

fn levels_of(records: &[InteractionRecord]) -> Result<Vec<Levels>> {
    records
        .iter()
        .map(|r| {
            r.levels.ok_or_else(|| {
                Error::validation("levels", format!("interaction {} has no levels; annotate it first", r.interaction_id))
            })
        })
        .collect()
}

/// Fills missing levels with `annotator`. Records that already carry levels are kept as is.
pub fn annotate_logs(records: &[InteractionRecord], annotator: &dyn Annotator) -> Result<Vec<InteractionRecord>> {
    records
        .par_iter()
        .map(|r| {
            if r.levels.is_some() {
                return Ok(r.clone());
            }
            let (Some(s), Some(t)) = (&r.seeker_text, &r.response_text) else {
                return Err(Error::validation(
                    "response_text",
                    format!("interaction {} has neither levels nor texts", r.interaction_id),
                ));
            };
            let mut out = r.clone();
            out.levels = Some(annotator.levels(s, t)?);
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    /// Join years to report; `None` keeps every cohort.
    pub join_years: Option<Vec<i32>>,
    pub min_posts: usize,
    pub min_tenure_years: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            join_years: None,
            min_posts: 10,
            min_tenure_years: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearPoint {
    pub year: i32,
    pub posts: usize,
    /// Mean ER, IP and EX level.
    pub mean_levels: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSeries {
    pub join_year: i32,
    pub responders: usize,
    pub years: Vec<YearPoint>,
}

/// Mean level per calendar year for each cohort of responders, grouped by the year of
/// their first post. Responders with too few posts or too short a tenure are dropped.
pub fn empathy_over_time(records: &[InteractionRecord], spec: &CohortSpec) -> Result<Vec<CohortSeries>> {
    let levels = levels_of(records)?;
    let mut by_responder: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_responder.entry(&r.responder_id).or_default().push(i);
    }
    // join year -> (responder count, year -> (posts, level sums))
    let mut cohorts: BTreeMap<i32, (usize, BTreeMap<i32, (usize, [u64; 3])>)> = BTreeMap::new();
    for idx in by_responder.values() {
        let first = idx.iter().map(|&i| records[i].timestamp).min().unwrap_or(0);
        let last = idx.iter().map(|&i| records[i].timestamp).max().unwrap_or(0);
        if idx.len() < spec.min_posts || ((last - first) as f64) < spec.min_tenure_years * SECONDS_PER_YEAR {
            continue;
        }
        let join = idx.iter().map(|&i| records[i].year()).min().unwrap_or(0);
        if spec.join_years.as_ref().is_some_and(|ys| !ys.contains(&join)) {
            continue;
        }
        let cohort = cohorts.entry(join).or_default();
        cohort.0 += 1;
        for &i in idx {
            let y = cohort.1.entry(records[i].year()).or_default();
            y.0 += 1;
            for (s, l) in y.1.iter_mut().zip(levels[i]) {
                *s += l as u64;
            }
        }
    }
    Ok(cohorts
        .into_iter()
        .map(|(join_year, (responders, years))| CohortSeries {
            join_year,
            responders,
            years: years
                .into_iter()
                .map(|(year, (posts, sums))| YearPoint {
                    year,
                    posts,
                    mean_levels: sums.map(|s| s as f64 / posts as f64),
                })
                .collect(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub like_rate: f64,
    pub mean_replies: f64,
}

impl GroupStats {
    fn of<'r>(group: impl Iterator<Item = &'r InteractionRecord>) -> Option<Self> {
        let (mut n, mut likes, mut replies) = (0usize, 0usize, 0u64);
        for r in group {
            n += 1;
            likes += r.seeker_liked as usize;
            replies += r.reply_count as u64;
        }
        (n > 0).then(|| Self {
            count: n,
            like_rate: likes as f64 / n as f64,
            mean_replies: replies as f64 / n as f64,
        })
    }
}

/// `(new − base) / base`; absent when `base` is zero.
pub fn relative_change(new: f64, base: f64) -> Option<f64> {
    (base != 0.0).then(|| (new - base) / base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismOutcomes {
    /// Indexed by level; absent when no record has that level.
    pub by_level: [Option<GroupStats>; 3],
    /// Strong versus none.
    pub like_change: Option<f64>,
    pub reply_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelOutcomes {
    /// ER, IP, EX.
    pub mechanisms: [MechanismOutcomes; 3],
    /// Indexed by total score 0..=6.
    pub by_total: [Option<GroupStats>; 7],
}

/// Like rate and replies grouped by level of each mechanism and by total score.
pub fn feedback_by_level(records: &[InteractionRecord]) -> Result<LevelOutcomes> {
    if records.is_empty() {
        return Err(Error::Empty("interaction log"));
    }
    let levels = levels_of(records)?;
    let mechanisms = [0, 1, 2].map(|m| {
        let by_level = Level::ALL.map(|l| {
            GroupStats::of(records.iter().zip(&levels).filter(|(_, lv)| lv[m] == l).map(|(r, _)| r))
        });
        let change = |f: fn(&GroupStats) -> f64| match (&by_level[2], &by_level[0]) {
            (Some(s), Some(n)) => relative_change(f(s), f(n)),
            _ => None,
        };
        MechanismOutcomes {
            like_change: change(|g| g.like_rate),
            reply_change: change(|g| g.mean_replies),
            by_level,
        }
    });
    let by_total: [Option<GroupStats>; 7] = std::array::from_fn(|t| {
        GroupStats::of(
            records
                .iter()
                .zip(&levels)
                .filter(|(_, lv)| crate::feedback::total_of(lv) as usize == t)
                .map(|(r, _)| r),
        )
    });
    Ok(LevelOutcomes { mechanisms, by_total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateGroup {
    pub count: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FollowStats {
    /// Total score of at least one.
    pub empathic: Option<RateGroup>,
    /// Total score zero.
    pub baseline: Option<RateGroup>,
    /// `empathic / baseline − 1`.
    pub relative_change: Option<f64>,
}

/// Follow-within-a-day rate after empathic (total ≥ 1) versus non-empathic conversations.
pub fn follow_analysis(records: &[InteractionRecord]) -> Result<FollowStats> {
    let levels = levels_of(records)?;
    let group = |empathic: bool| {
        let (mut n, mut k) = (0usize, 0usize);
        for (r, lv) in records.iter().zip(&levels) {
            if (crate::feedback::total_of(lv) >= 1) == empathic {
                n += 1;
                k += r.followed_within_24h as usize;
            }
        }
        (n > 0).then(|| RateGroup {
            count: n,
            rate: k as f64 / n as f64,
        })
    };
    let (empathic, baseline) = (group(true), group(false));
    let relative_change = match (empathic, baseline) {
        (Some(e), Some(b)) => relative_change(e.rate, b.rate),
        _ => None,
    };
    Ok(FollowStats {
        empathic,
        baseline,
        relative_change,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderCell {
    pub responder_gender: String,
    pub seeker_gender: String,
    pub count: usize,
    pub mean_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderComparison {
    /// Index into `cells`.
    pub cell: usize,
    pub baseline: usize,
    /// `mean(cell) / mean(baseline) − 1`.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderTable {
    /// Sorted by (responder, seeker) gender.
    pub cells: Vec<GenderCell>,
    /// Every ordered pair of distinct cells whose baseline mean is nonzero.
    pub comparisons: Vec<GenderComparison>,
}

impl GenderTable {
    pub fn cell(&self, responder: &str, seeker: &str) -> Option<&GenderCell> {
        self.cells
            .iter()
            .find(|c| c.responder_gender == responder && c.seeker_gender == seeker)
    }

    pub fn compare(&self, cell: (&str, &str), baseline: (&str, &str)) -> Option<f64> {
        let a = self.cell(cell.0, cell.1)?;
        let b = self.cell(baseline.0, baseline.1)?;
        relative_change(a.mean_total, b.mean_total)
    }
}

/// Mean total score per (responder gender, seeker gender). Records missing either gender
/// are skipped.
pub fn gender_crosstab(records: &[InteractionRecord]) -> Result<GenderTable> {
    let levels = levels_of(records)?;
    let mut acc: BTreeMap<(&str, &str), (usize, u64)> = BTreeMap::new();
    for (r, lv) in records.iter().zip(&levels) {
        if let (Some(rg), Some(sg)) = (&r.responder_gender, &r.seeker_gender) {
            let e = acc.entry((rg.as_str(), sg.as_str())).or_default();
            e.0 += 1;
            e.1 += crate::feedback::total_of(lv) as u64;
        }
    }
    let cells: Vec<GenderCell> = acc
        .into_iter()
        .map(|((rg, sg), (n, sum))| GenderCell {
            responder_gender: rg.to_string(),
            seeker_gender: sg.to_string(),
            count: n,
            mean_total: sum as f64 / n as f64,
        })
        .collect();
    let mut comparisons = Vec::new();
    for (i, a) in cells.iter().enumerate() {
        for (j, b) in cells.iter().enumerate() {
            if i == j {
                continue;
            }
            if let Some(relative) = relative_change(a.mean_total, b.mean_total) {
                comparisons.push(GenderComparison {
                    cell: i,
                    baseline: j,
                    relative,
                });
            }
        }
    }
    Ok(GenderTable { cells, comparisons })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, responder: &str, ts: i64, levels: [u8; 3]) -> InteractionRecord {
        InteractionRecord {
            interaction_id: format!("i{id}"),
            seeker_id: format!("s{id}"),
            responder_id: responder.into(),
            timestamp: ts,
            seeker_liked: id % 2 == 0,
            reply_count: id as u32 % 4,
            followed_within_24h: id % 3 == 0,
            seeker_gender: None,
            responder_gender: Some("f".into()),
            levels: Some(levels.map(|v| Level::try_from(v).unwrap())),
            seeker_text: None,
            response_text: None,
        }
    }

    #[test]
    fn log_round_trip() {
        let mut a = rec(1, "r", 1_600_000_000, [0, 1, 2]);
        a.seeker_text = Some("line\tone\nand two".into());
        a.response_text = Some("ok".into());
        let mut b = rec(2, "r", 1_600_000_100, [0, 0, 0]);
        b.levels = None;
        let text = log_to_string(&[a.clone(), b.clone()]);
        assert_eq!(parse_log(&text).unwrap(), vec![a, b]);
    }

    #[test]
    fn log_errors_name_fields() {
        let line = "i\ts\tr\t-5\t0\t0\t0\t\t\t\t\t";
        match parse_record(line, 3) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "timestamp"),
            other => panic!("{other:?}"),
        }
        assert!(parse_record("i\ts\tr\t5\t2\t0\t0\t\t\t\t\t", 1).is_err());
        assert!(parse_record("i\ts\tr\t5\t1\t0\t0\t\t\t3\t0\t0", 1).is_err());
        assert!(parse_record("too\tfew", 1).is_err());
    }

    #[test]
    fn constant_responder_is_flat() {
        let year = 31_557_600;
        let records: Vec<_> = (0..12).map(|i| rec(i, "r", 1_500_000_000 + i as i64 * year / 4, [1, 2, 0])).collect();
        let out = empathy_over_time(&records, &CohortSpec::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].years.len() >= 3);
        assert!(out[0].years.iter().all(|p| p.mean_levels == [1.0, 2.0, 0.0]));
    }

    #[test]
    fn below_min_posts_is_empty() {
        let records: Vec<_> = (0..5).map(|i| rec(i, "r", 1_500_000_000 + i as i64 * 40_000_000, [1, 1, 1])).collect();
        assert!(empathy_over_time(&records, &CohortSpec::default()).unwrap().is_empty());
    }

    #[test]
    fn all_liked_means_no_change() {
        let mut records: Vec<_> = (0..9).map(|i| rec(i, "r", 1_000 + i as i64, [(i % 3) as u8, 0, 0])).collect();
        for r in &mut records {
            r.seeker_liked = true;
        }
        let out = feedback_by_level(&records).unwrap();
        let er = &out.mechanisms[0];
        assert!(er.by_level.iter().all(|g| g.unwrap().like_rate == 1.0));
        assert_eq!(er.like_change, Some(0.0));
        assert!(out.mechanisms[1].by_level[1].is_none());
    }

    #[test]
    fn zero_baseline_follow_rate_is_absent() {
        let mut records = vec![rec(1, "r", 10, [0, 0, 0]), rec(2, "r", 20, [1, 0, 0])];
        records[0].followed_within_24h = false;
        records[1].followed_within_24h = true;
        let f = follow_analysis(&records).unwrap();
        assert_eq!(f.empathic.unwrap().rate, 1.0);
        assert_eq!(f.baseline.unwrap().rate, 0.0);
        assert!(f.relative_change.is_none());
    }

    #[test]
    fn missing_levels_are_rejected() {
        let mut r = rec(1, "r", 10, [0, 0, 0]);
        r.levels = None;
        assert!(matches!(feedback_by_level(&[r]), Err(Error::Validation { .. })));
    }
}
