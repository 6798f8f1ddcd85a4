//! Log aggregates against brute-force recomputation on known-answer fixtures.

use std::collections::HashMap;

use chrono::{DateTime, Datelike};
use empathy_core::analytics::*;
use empathy_core::fixtures::{cohort_log, engagement_log, follow_log, gender_log};
use empathy_core::pipeline::Annotator;
use empathy_core::{Level, Levels, Result};
use proptest::prelude::*;

fn year(ts: i64) -> i32 {
    DateTime::from_timestamp(ts, 0).unwrap().year()
}

fn total(r: &InteractionRecord) -> u32 {
    r.levels.unwrap().iter().map(|&l| l as u32).sum()
}

/// Recomputes cohort series by scanning all records for every (cohort, year, mechanism).
fn cohort_oracle(records: &[InteractionRecord], min_posts: usize, min_tenure_secs: f64) -> Vec<(i32, i32, [f64; 3])> {
    let mut ids: Vec<&str> = records.iter().map(|r| r.responder_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut kept: HashMap<&str, i32> = HashMap::new();
    for id in ids {
        let mine: Vec<&InteractionRecord> = records.iter().filter(|r| r.responder_id == id).collect();
        let first = mine.iter().map(|r| r.timestamp).min().unwrap();
        let last = mine.iter().map(|r| r.timestamp).max().unwrap();
        if mine.len() >= min_posts && (last - first) as f64 >= min_tenure_secs {
            kept.insert(id, year(first));
        }
    }
    let mut cohorts: Vec<i32> = kept.values().copied().collect();
    cohorts.sort_unstable();
    cohorts.dedup();
    let mut out = Vec::new();
    for c in cohorts {
        let members: Vec<&InteractionRecord> = records
            .iter()
            .filter(|r| kept.get(r.responder_id.as_str()) == Some(&c))
            .collect();
        let mut years: Vec<i32> = members.iter().map(|r| year(r.timestamp)).collect();
        years.sort_unstable();
        years.dedup();
        for y in years {
            let in_year: Vec<_> = members.iter().filter(|r| year(r.timestamp) == y).collect();
            let means = [0, 1, 2].map(|m| {
                in_year.iter().map(|r| r.levels.unwrap()[m] as u32 as f64).sum::<f64>() / in_year.len() as f64
            });
            out.push((c, y, means));
        }
    }
    out
}

fn flatten(series: &[CohortSeries]) -> Vec<(i32, i32, [f64; 3])> {
    series
        .iter()
        .flat_map(|c| c.years.iter().map(move |p| (c.join_year, p.year, p.mean_levels)))
        .collect()
}

#[test]
fn cohort_decline_fixture() {
    let records = cohort_log(1);
    let spec = CohortSpec::default();
    let series = empathy_over_time(&records, &spec).unwrap();
    assert_eq!(flatten(&series), cohort_oracle(&records, 10, 365.25 * 86_400.0));
    assert_eq!(series.len(), 2);
    let early = &series[0];
    assert_eq!((early.join_year, early.responders), (2015, 5));
    let er: Vec<f64> = early.years.iter().map(|p| p.mean_levels[0]).collect();
    assert_eq!(er, vec![0.5, 0.41, 0.32]);
    let decline = (er[0] - er[2]) / er[0];
    assert!((decline - 0.36).abs() < 1e-12);
    assert_eq!(series[1].join_year, 2016);
    assert!(series[1].years.iter().all(|p| p.mean_levels[0] == 1.0));

    let only_2016 = CohortSpec {
        join_years: Some(vec![2016]),
        ..CohortSpec::default()
    };
    assert_eq!(empathy_over_time(&records, &only_2016).unwrap(), series[1..].to_vec());
    let lax = CohortSpec {
        min_posts: 0,
        min_tenure_years: 0.0,
        ..CohortSpec::default()
    };
    assert_eq!(flatten(&empathy_over_time(&records, &lax).unwrap()), cohort_oracle(&records, 0, 0.0));
}

proptest! {
    #[test]
    fn raising_min_posts_never_adds_responders(a in 0usize..40, b in 0usize..40, seed in 0u64..5) {
        let records = cohort_log(seed);
        let (lo, hi) = (a.min(b), a.max(b));
        let count = |min_posts| {
            let spec = CohortSpec { min_posts, min_tenure_years: 0.0, join_years: None };
            empathy_over_time(&records, &spec).unwrap().iter().map(|c| c.responders).sum::<usize>()
        };
        prop_assert!(count(hi) <= count(lo));
        for c in empathy_over_time(&records, &CohortSpec { min_posts: lo, ..CohortSpec::default() }).unwrap() {
            for p in c.years {
                prop_assert!(p.mean_levels.iter().all(|&m| (0.0..=2.0).contains(&m)));
            }
        }
    }
}

#[test]
fn likes_and_replies_fixture() {
    let records = engagement_log(2);
    let out = feedback_by_level(&records).unwrap();
    for m in 0..3 {
        for l in Level::ALL {
            let group: Vec<_> = records.iter().filter(|r| r.levels.unwrap()[m] == l).collect();
            match &out.mechanisms[m].by_level[l.index()] {
                None => assert!(group.is_empty()),
                Some(g) => {
                    assert_eq!(g.count, group.len());
                    let likes = group.iter().filter(|r| r.seeker_liked).count() as f64;
                    let replies: f64 = group.iter().map(|r| r.reply_count as f64).sum();
                    assert_eq!(g.like_rate, likes / group.len() as f64);
                    assert_eq!(g.mean_replies, replies / group.len() as f64);
                    assert!((0.0..=1.0).contains(&g.like_rate));
                }
            }
        }
    }
    let er = &out.mechanisms[0];
    assert_eq!(er.by_level[2].unwrap().like_rate, 0.29);
    assert_eq!(er.by_level[0].unwrap().like_rate, 0.20);
    assert!(er.by_level[1].is_none());
    assert!((er.like_change.unwrap() - 0.45).abs() < 1e-12);
    assert!((er.reply_change.unwrap() - 0.47).abs() < 1e-12);
    for t in 0..7 {
        let n = records.iter().filter(|r| total(r) == t as u32).count();
        assert_eq!(out.by_total[t].map_or(0, |g| g.count), n);
    }
}

#[test]
fn follow_fixture() {
    let records = follow_log(3);
    let f = follow_analysis(&records).unwrap();
    let rate = |pred: &dyn Fn(&InteractionRecord) -> bool| {
        let g: Vec<_> = records.iter().filter(|r| pred(r)).collect();
        g.iter().filter(|r| r.followed_within_24h).count() as f64 / g.len() as f64
    };
    let e = rate(&|r| total(r) >= 1);
    let b = rate(&|r| total(r) == 0);
    assert_eq!(f.empathic.unwrap().rate, e);
    assert_eq!(f.baseline.unwrap().rate, b);
    assert_eq!((e, b), (0.0895, 0.05));
    assert!((f.relative_change.unwrap() - 0.79).abs() < 1e-12);

    let same: Vec<_> = records.iter().cloned().map(|mut r| {
        r.followed_within_24h = r.interaction_id.ends_with('0');
        r
    }).collect();
    let f = follow_analysis(&same).unwrap();
    let expect = f.empathic.unwrap().rate / f.baseline.unwrap().rate - 1.0;
    assert!((f.relative_change.unwrap() - expect).abs() < 1e-12);
}

#[test]
fn gender_fixture() {
    let records = gender_log(4);
    let t = gender_crosstab(&records).unwrap();
    for c in &t.cells {
        let g: Vec<_> = records
            .iter()
            .filter(|r| {
                r.responder_gender.as_deref() == Some(&c.responder_gender)
                    && r.seeker_gender.as_deref() == Some(&c.seeker_gender)
            })
            .collect();
        assert_eq!(c.count, g.len());
        assert_eq!(c.mean_total, g.iter().map(|r| total(r) as f64).sum::<f64>() / g.len() as f64);
        assert!((0.0..=6.0).contains(&c.mean_total));
    }
    assert_eq!(t.cells.len(), 3);
    assert!(t.cell("male", "female").is_none());
    let ff_mm = t.compare(("female", "female"), ("male", "male")).unwrap();
    assert!((ff_mm - 0.32).abs() < 1e-12);
    assert!(t.compare(("male", "female"), ("male", "male")).is_none());
    assert_eq!(t.comparisons.len(), 6);

    let flat: Vec<_> = records
        .iter()
        .cloned()
        .map(|mut r| {
            r.levels = Some([Level::Weak; 3]);
            r
        })
        .collect();
    assert!(gender_crosstab(&flat).unwrap().comparisons.iter().all(|c| c.relative == 0.0));
}

struct Lookup;

impl Annotator for Lookup {
    fn levels(&self, _seeker: &str, response: &str) -> Result<Levels> {
        let n = response.len();
        Ok([n % 3, (n / 3) % 3, (n / 9) % 3].map(|i| Level::ALL[i]))
    }
}

#[test]
fn annotation_fills_missing_levels_only() {
    let mut records = engagement_log(5);
    records.truncate(100);
    let precomputed = records.clone();
    assert_eq!(annotate_logs(&precomputed, &Lookup).unwrap(), precomputed);

    let raw: Vec<_> = records
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, mut r)| {
            r.levels = None;
            r.seeker_text = Some("I feel alone".into());
            r.response_text = Some("x".repeat(i + 1));
            r
        })
        .collect();
    let out = annotate_logs(&raw, &Lookup).unwrap();
    assert_eq!(out.len(), 100);
    for (r, o) in raw.iter().zip(&out) {
        assert_eq!(o.levels.unwrap(), Lookup.levels("", r.response_text.as_deref().unwrap()).unwrap());
    }
    assert_eq!(annotate_logs(&raw, &Lookup).unwrap(), out);

    let mut bare = raw[0].clone();
    bare.response_text = None;
    assert!(annotate_logs(&[bare], &Lookup).is_err());
}

#[test]
fn log_file_round_trip_with_texts() {
    let mut records = gender_log(6);
    records[0].seeker_text = Some("tab\there".into());
    records[0].response_text = Some("multi\nline".into());
    records[0].levels = None;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.tsv");
    std::fs::write(&path, log_to_string(&records)).unwrap();
    assert_eq!(load_log(&path).unwrap(), records);
}
