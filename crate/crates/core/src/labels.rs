//! Emotion classes and action-unit vocabulary.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The twelve annotated action units.
pub const VALID_AUS: [u8; 12] = [1, 2, 4, 6, 7, 10, 12, 15, 23, 24, 25, 26];

pub type AuSet = BTreeSet<u8>;

pub fn is_valid_au(au: u8) -> bool {
    VALID_AUS.contains(&au)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeClass {
    Neutral,
    Anger,
    Disgust,
    Fear,
    Happiness,
    Sadness,
    Surprise,
}

impl FeClass {
    pub const ALL: [FeClass; 7] = [
        FeClass::Neutral,
        FeClass::Anger,
        FeClass::Disgust,
        FeClass::Fear,
        FeClass::Happiness,
        FeClass::Sadness,
        FeClass::Surprise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeClass::Neutral => "Neutral",
            FeClass::Anger => "Anger",
            FeClass::Disgust => "Disgust",
            FeClass::Fear => "Fear",
            FeClass::Happiness => "Happiness",
            FeClass::Sadness => "Sadness",
            FeClass::Surprise => "Surprise",
        }
    }

    /// Adjective form accepted when parsing free text.
    pub fn inflection(self) -> &'static str {
        match self {
            FeClass::Neutral => "neutral",
            FeClass::Anger => "angry",
            FeClass::Disgust => "disgusted",
            FeClass::Fear => "fearful",
            FeClass::Happiness => "happy",
            FeClass::Sadness => "sad",
            FeClass::Surprise => "surprised",
        }
    }
}

impl fmt::Display for FeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        FeClass::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::Parse(format!("unknown emotion class {s:?}")))
    }
}

/// `"AU1, AU4, AU12"` in ascending order, or `"none"` for the empty set.
pub fn render_aus<'a>(aus: impl IntoIterator<Item = &'a u8>) -> String {
    let sorted: AuSet = aus.into_iter().copied().collect();
    if sorted.is_empty() {
        return "none".to_string();
    }
    sorted.iter().map(|a| format!("AU{a}")).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Deserialize)]
struct FacsFile {
    unit: Vec<FacsUnit>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct FacsUnit {
    pub au: u8,
    pub name: String,
}

struct FacsTable {
    units: Vec<FacsUnit>,
    patterns: Vec<(u8, Regex)>,
}

fn facs_table() -> &'static FacsTable {
    static TABLE: OnceLock<FacsTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let file: FacsFile = toml::from_str(include_str!("../data/facs.toml")).expect("bundled FACS table parses");
        let patterns = file
            .unit
            .iter()
            .map(|u| {
                let words: Vec<String> = u.name.split_whitespace().map(regex::escape).collect();
                let re = Regex::new(&format!(r"(?i)\b{}\b", words.join(r"\s+"))).expect("valid pattern");
                (u.au, re)
            })
            .collect();
        FacsTable {
            units: file.unit,
            patterns,
        }
    })
}

/// Canonical FACS action name of an AU, if known.
pub fn facs_name(au: u8) -> Option<&'static str> {
    facs_table().units.iter().find(|u| u.au == au).map(|u| u.name.as_str())
}

pub fn facs_units() -> &'static [FacsUnit] {
    &facs_table().units
}

fn au_token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bAU ?(\d+)\b").expect("valid pattern"))
}

/// Every `AU<k>` token in `text` with its byte offset, in order.
pub fn au_tokens(text: &str) -> Vec<(usize, u32)> {
    au_token_regex()
        .captures_iter(text)
        .filter_map(|c| {
            let m = c.get(0)?;
            c[1].parse::<u32>().ok().map(|k| (m.start(), k))
        })
        .collect()
}

/// AUs named in `text` by canonical FACS action name.
pub fn facs_name_mentions(text: &str) -> AuSet {
    facs_table()
        .patterns
        .iter()
        .filter(|(_, re)| re.is_match(text))
        .map(|(au, _)| *au)
        .collect()
}

/// AUs mentioned either as `AU<k>` or by FACS name.
pub fn au_mentions(text: &str) -> AuSet {
    let mut out: AuSet = au_tokens(text)
        .into_iter()
        .filter_map(|(_, k)| u8::try_from(k).ok())
        .collect();
    out.extend(facs_name_mentions(text));
    out
}
