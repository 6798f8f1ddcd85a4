//! The three communication mechanisms and their levels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    EmotionalReactions,
    Interpretations,
    Explorations,
}

impl Mechanism {
    /// Canonical order: ER, IP, EX.
    pub const ALL: [Mechanism; 3] = [
        Mechanism::EmotionalReactions,
        Mechanism::Interpretations,
        Mechanism::Explorations,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            Mechanism::EmotionalReactions => "er",
            Mechanism::Interpretations => "ip",
            Mechanism::Explorations => "ex",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::EmotionalReactions => "emotional_reactions",
            Mechanism::Interpretations => "interpretations",
            Mechanism::Explorations => "explorations",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Mechanism::EmotionalReactions => "Emotional Reactions",
            Mechanism::Interpretations => "Interpretations",
            Mechanism::Explorations => "Explorations",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        match norm.as_str() {
            "er" | "emotionalreactions" | "emotions" => Ok(Mechanism::EmotionalReactions),
            "ip" | "interpretations" => Ok(Mechanism::Interpretations),
            "ex" | "explorations" => Ok(Mechanism::Explorations),
            _ => Err(Error::validation("mechanism", format!("unknown mechanism {s:?}"))),
        }
    }
}

/// Level of communication of one mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Level {
    None = 0,
    Weak = 1,
    Strong = 2,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::None, Level::Weak, Level::Strong];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Level> {
        Level::ALL.get(i).copied()
    }

    pub fn describe(self) -> &'static str {
        match self {
            Level::None => "no communication",
            Level::Weak => "weak communication",
            Level::Strong => "strong communication",
        }
    }
}

impl From<Level> for u8 {
    fn from(l: Level) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Level {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Level::from_index(v as usize)
            .ok_or_else(|| Error::validation("level", format!("{v} is not in {{0,1,2}}")))
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::validation("level", format!("{s:?} is not an integer")))?;
        Level::try_from(v)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

/// Levels of all three mechanisms in canonical order.
pub type Levels = [Level; 3];

/// Half-open byte interval into a text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn slice<'t>(&self, text: &'t str) -> Option<&'t str> {
        text.get(self.start..self.end)
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}
