//! Seeded synthetic corpora with known structure, for demos and tests.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analytics::InteractionRecord;
use crate::labels::{Level, Mechanism, Span};
use crate::text::corpus::{AnnotatedPair, Annotation};

const FILLERS: &[&str] = &["ok", "well", "today", "yeah", "so", "anyway", "hmm", "sure", "maybe", "also", "then", "just"];

const SEEKER_POSTS: &[&str] = &[
    "I am about to have an anxiety attack.",
    "Nobody at work talks to me anymore.",
    "I failed my exam again and my parents are angry.",
    "I can't sleep and everything feels heavy.",
    "My best friend moved away last week.",
    "I keep thinking nothing will ever get better.",
];

/// Weak and strong phrases per mechanism. Within a mechanism the two banks share no words
/// (punctuation aside), and no phrase word is a filler.
fn bank(m: Mechanism, level: Level) -> &'static [&'static str] {
    match (m, level) {
        (_, Level::None) => &[],
        (Mechanism::EmotionalReactions, Level::Weak) => &["everything will be fine", "hang in there"],
        (Mechanism::EmotionalReactions, Level::Strong) => &["I feel really sad for you", "my heart breaks hearing about it"],
        (Mechanism::Interpretations, Level::Weak) => &["I understand how you feel", "I get it"],
        (Mechanism::Interpretations, Level::Strong) => &["this must be terrifying", "that must be terrible"],
        (Mechanism::Explorations, Level::Weak) => &["what happened?", "want to talk?"],
        (Mechanism::Explorations, Level::Strong) => &["are you feeling alone right now?", "do you feel scared at night?"],
    }
}

fn fillers(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<&'static str> {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| *FILLERS.choose(rng).expect("nonempty")).collect()
}

/// Joins `parts` with spaces; returns the text and the span of each part marked `true`.
fn assemble(parts: &[(String, Option<Mechanism>)]) -> (String, Vec<(Mechanism, Span)>) {
    let mut text = String::new();
    let mut spans = Vec::new();
    for (p, m) in parts {
        if !text.is_empty() {
            text.push(' ');
        }
        let start = text.len();
        text.push_str(p);
        if let Some(m) = m {
            spans.push((*m, Span { start, end: text.len() }));
        }
    }
    (text, spans)
}

fn build(levels: [Level; 3], rng: &mut ChaCha8Rng) -> AnnotatedPair {
    let mut parts: Vec<(String, Option<Mechanism>)> = Vec::new();
    for w in fillers(rng, 1, 3) {
        parts.push((w.to_string(), None));
    }
    for m in Mechanism::ALL {
        if let Some(p) = bank(m, levels[m.index()]).choose(rng) {
            parts.push((p.to_string(), Some(m)));
            for w in fillers(rng, 0, 2) {
                parts.push((w.to_string(), None));
            }
        }
    }
    let (response, spans) = assemble(&parts);
    let annotations = Mechanism::ALL.map(|m| {
        let s: Vec<Span> = spans.iter().filter(|(k, _)| *k == m).map(|(_, s)| *s).collect();
        Annotation::new(levels[m.index()], s)
    });
    AnnotatedPair {
        seeker: SEEKER_POSTS.choose(rng).expect("nonempty").to_string(),
        response,
        annotations,
    }
}

/// `n` pairs where only `mechanism` is present, with levels cycling 0, 1, 2. The level is
/// determined by which phrase bank appears, and the rationale is exactly that phrase.
pub fn separable_pairs(mechanism: Mechanism, n: usize, seed: u64) -> Vec<AnnotatedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut levels = [Level::None; 3];
            levels[mechanism.index()] = Level::ALL[i % 3];
            build(levels, &mut rng)
        })
        .collect()
}

/// `n` pairs with independent uniform levels for all three mechanisms.
pub fn demo_corpus(n: usize, seed: u64) -> Vec<AnnotatedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let levels = [(); 3].map(|_| Level::ALL[rng.random_range(0..3)]);
            build(levels, &mut rng)
        })
        .collect()
}

const YEAR: i64 = 31_557_600;
/// 2015-01-01T00:00:00Z.
const START_2015: i64 = 1_420_070_400;

fn record(id: usize, responder: String, timestamp: i64, levels: [u8; 3]) -> InteractionRecord {
    InteractionRecord {
        interaction_id: format!("x{id}"),
        seeker_id: format!("s{}", id % 97),
        responder_id: responder,
        timestamp,
        seeker_liked: false,
        reply_count: 0,
        followed_within_24h: false,
        seeker_gender: None,
        responder_gender: None,
        levels: Some(levels.map(|v| Level::ALL[v as usize])),
        seeker_text: None,
        response_text: None,
    }
}

/// Responders who joined in 2015 and whose mean ER level goes 0.50, 0.41, 0.32 over
/// 2015 to 2017, plus a 2016 cohort at a constant 1.0 and two responders the default
/// cohort filters drop (too few posts, too short a tenure).
pub fn cohort_log(seed: u64) -> Vec<InteractionRecord> {
    let mut out = Vec::new();
    let mut id = 0;
    let mut push = |out: &mut Vec<InteractionRecord>, who: String, ts: i64, er: u8| {
        id += 1;
        out.push(record(id, who, ts, [er, (id % 3) as u8, 0]));
    };
    // Five 2015 responders, 20 posts a year each; per-year ER sums 50, 41, 32 over 100 posts.
    for (y, ones) in [50usize, 41, 32].into_iter().enumerate() {
        for k in 0..100 {
            let who = format!("early{}", k % 5);
            let ts = START_2015 + y as i64 * YEAR + (k as i64 + 1) * 86_400;
            push(&mut out, who, ts, u8::from(k < ones));
        }
    }
    for k in 0..24 {
        let ts = START_2015 + YEAR + 10 * 86_400 + k as i64 * YEAR / 10;
        push(&mut out, format!("late{}", k % 2), ts, 1);
    }
    for k in 0..5 {
        push(&mut out, "sparse".into(), START_2015 + k * YEAR / 2, 2);
    }
    for k in 0..12 {
        push(&mut out, "brief".into(), START_2015 + k * 86_400, 2);
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Strong ER is liked 29% of the time versus 20% with none, and draws 1.47 replies on
/// average versus 1.00; there are no weak-ER records.
pub fn engagement_log(seed: u64) -> Vec<InteractionRecord> {
    let mut out = Vec::new();
    for i in 0..200 {
        let strong = i % 2 == 0;
        let k = i / 2;
        let mut r = record(i, format!("r{}", i % 7), START_2015 + i as i64 * 3_600, [2 * strong as u8, (i % 3) as u8, 0]);
        r.seeker_liked = if strong { k < 29 } else { k < 20 };
        // 100 replies spread as one each; the strong side gets 47 extra.
        r.reply_count = 1 + u32::from(strong && k < 47);
        out.push(r);
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Followed within a day after 8.95% of empathic conversations and 5% of the rest.
pub fn follow_log(seed: u64) -> Vec<InteractionRecord> {
    let mut out = Vec::new();
    for i in 0..3000 {
        let empathic = i < 2000;
        let levels = if empathic { [(i % 2) as u8, 1 - (i % 2) as u8, (i % 3) as u8] } else { [0, 0, 0] };
        let mut r = record(i, format!("r{}", i % 11), START_2015 + i as i64 * 60, levels);
        r.followed_within_24h = if empathic { i < 179 } else { i - 2000 < 50 };
        out.push(r);
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Mean total score 1.32 for female responders to female seekers, 1.00 for male to male,
/// 1.10 for female to male; some records lack a gender.
pub fn gender_log(seed: u64) -> Vec<InteractionRecord> {
    let mut out = Vec::new();
    let cells: [(&str, &str, [usize; 3]); 3] = [
        // (responder, seeker, records at total 0, 1, 2 ...) as counts for totals 0/1/2.
        ("female", "female", [18, 32, 50]),
        ("male", "male", [25, 50, 25]),
        ("female", "male", [20, 50, 30]),
    ];
    let mut id = 0;
    for (rg, sg, counts) in cells {
        for (total, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                id += 1;
                let levels = match total {
                    0 => [0, 0, 0],
                    1 => [0, 1, 0],
                    _ => [1, 0, 1],
                };
                let mut r = record(id, format!("r{id}"), START_2015 + id as i64, levels);
                r.responder_gender = Some(rg.into());
                r.seeker_gender = Some(sg.into());
                out.push(r);
            }
        }
    }
    for k in 0..10 {
        id += 1;
        let mut r = record(id, "anon".into(), START_2015 + id as i64, [2, 2, 2]);
        r.responder_gender = (k % 2 == 0).then(|| "female".into());
        out.push(r);
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_valid_and_rationales_are_phrases() {
        for p in separable_pairs(Mechanism::Interpretations, 30, 1).iter().chain(&demo_corpus(30, 2)) {
            p.validate().unwrap();
            for m in Mechanism::ALL {
                let a = p.annotation(m);
                assert_eq!(a.spans.len(), (a.level != Level::None) as usize);
                for s in &a.spans {
                    assert!(bank(m, a.level).contains(&s.slice(&p.response).unwrap()));
                }
            }
        }
    }

    #[test]
    fn banks_are_disjoint_from_fillers_and_each_other() {
        for m in Mechanism::ALL {
            let words = |l| -> Vec<String> {
                bank(m, l)
                    .iter()
                    .flat_map(|p| crate::text::tokenize(p))
                    .map(|t| t.text)
                    .filter(|w| w.chars().all(char::is_alphanumeric))
                    .collect()
            };
            let (weak, strong) = (words(Level::Weak), words(Level::Strong));
            assert!(weak.iter().all(|w| !strong.contains(w) && !FILLERS.contains(&w.as_str())));
            assert!(strong.iter().all(|w| !FILLERS.contains(&w.as_str())));
        }
    }
}
