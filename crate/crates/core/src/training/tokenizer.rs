use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";

pub const UNK_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const SEP_ID: usize = 2;

fn word_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z0-9'_-]+|[^\sA-Za-z0-9'_-]").expect("valid pattern"))
}

/// Words and single punctuation marks, in order.
pub fn split_words(text: &str) -> Vec<&str> {
    word_regex().find_iter(text).map(|m| m.as_str()).collect()
}

fn attaches_left(token: &str) -> bool {
    matches!(token, "," | "." | "!" | "?" | ";" | ":" | ")")
}

/// Word-level vocabulary: three special tokens, then corpus words sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(words: Vec<String>) -> Self {
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, ids }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.words
    }
}

impl Tokenizer {
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen = BTreeSet::new();
        for t in texts {
            seen.extend(split_words(t).into_iter().map(str::to_string));
        }
        let mut words: Vec<String> = [UNK, EOS, SEP].iter().map(|s| s.to_string()).collect();
        words.extend(seen.into_iter().filter(|w| ![UNK, EOS, SEP].contains(&w.as_str())));
        Self::from(words)
    }

    /// Rebuild from a stored word list, checking the special tokens.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 3 || words[UNK_ID] != UNK || words[EOS_ID] != EOS || words[SEP_ID] != SEP {
            return Err(Error::Invalid("vocabulary must start with <unk>, <eos>, <sep>".into()));
        }
        let t = Self::from(words);
        if t.ids.len() != t.words.len() {
            return Err(Error::Invalid("vocabulary has duplicate words".into()));
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    /// Unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    /// Like [`Tokenizer::encode`] but rejects unknown words.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<usize>> {
        split_words(text)
            .into_iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Invalid(format!("word {w:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Words joined by spaces, punctuation attached to the previous word.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let w = self.words.get(id).map_or(UNK, String::as_str);
            if !out.is_empty() && !attaches_left(w) {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }

    /// Text as it comes back from an encode/decode round trip.
    pub fn normalize(&self, text: &str) -> String {
        self.decode(&self.encode(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_canonical_text() {
        let text = "Happiness. Activated: AU6, AU12.";
        let t = Tokenizer::from_corpus([text]);
        assert_eq!(t.decode(&t.encode(text)), text);
        assert_eq!(t.words()[..3], [UNK, EOS, SEP]);
    }

    #[test]
    fn unknown_words() {
        let t = Tokenizer::from_corpus(["a b"]);
        assert_eq!(t.encode("a zebra"), vec![t.id("a").unwrap(), UNK_ID]);
        assert!(t.encode_strict("zebra").is_err());
    }

    #[test]
    fn serde_as_word_list() {
        let t = Tokenizer::from_corpus(["x y"]);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"["<unk>","<eos>","<sep>","x","y"]"#);
        let back: Tokenizer = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }
}
