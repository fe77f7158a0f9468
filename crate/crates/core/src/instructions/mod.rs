//! Instruction-data construction.
//!
//! Each annotated face goes through: generation prompt -> external text
//! generator -> three-part description -> consistency check against the
//! labels -> three question/answer records. Records that fail the check are
//! quarantined. Train/eval splits are subject-disjoint.

mod assemble;
pub mod client;
mod pipeline;
mod prompt;
mod split;
mod templates;
mod validate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{is_valid_au, AuSet, FeClass};

pub use assemble::{make_instructions, resequence_reasoning};
pub use pipeline::{build_dataset, BuildOptions, DatasetBuild, FailedRecord, QuarantinedRecord};
pub use prompt::{build_generation_prompt, parse_structured_description, GenerationPrompt, FORMAT_PREAMBLE};
pub use split::split_dataset;
pub use templates::{TemplateBank, CANONICAL_AUD_PROMPT, CANONICAL_FER_PROMPT, MIN_TEMPLATES};
pub use validate::{validate_description, ValidationReport};

/// Ground truth for one face image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub subject_id: String,
    pub fe_label: FeClass,
    pub au_set: Vec<u8>,
}

impl AnnotationRecord {
    pub fn new(image_id: &str, subject_id: &str, fe_label: FeClass, aus: &[u8]) -> Result<Self> {
        let r = Self {
            image_id: image_id.to_string(),
            subject_id: subject_id.to_string(),
            fe_label,
            au_set: aus.to_vec(),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_id.is_empty() {
            return Err(Error::Invalid("annotation has an empty image_id".into()));
        }
        let mut seen = AuSet::new();
        for &au in &self.au_set {
            if !is_valid_au(au) {
                return Err(Error::Invalid(format!(
                    "{}: AU{au} is not one of the twelve annotated AUs",
                    self.image_id
                )));
            }
            if !seen.insert(au) {
                return Err(Error::Invalid(format!("{}: AU{au} listed twice", self.image_id)));
            }
        }
        Ok(())
    }

    pub fn aus(&self) -> AuSet {
        self.au_set.iter().copied().collect()
    }
}

/// The three parts of a generated description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredDescription {
    pub emotion_summary: String,
    pub facial_movement: String,
    pub emotion_reasoning: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionType {
    Summary,
    Movement,
    Reasoning,
}

impl InstructionType {
    pub const ALL: [InstructionType; 3] = [
        InstructionType::Summary,
        InstructionType::Movement,
        InstructionType::Reasoning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InstructionType::Summary => "summary",
            InstructionType::Movement => "movement",
            InstructionType::Reasoning => "reasoning",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub image_id: String,
    #[serde(rename = "type")]
    pub kind: InstructionType,
    pub question: String,
    pub answer: String,
}

/// Per-record seed: the run seed mixed with an FNV-1a hash of the image id.
pub fn record_seed(seed: u64, image_id: &str) -> u64 {
    seed ^ fnv1a(image_id)
}

/// Stable 64-bit FNV-1a hash.
pub(crate) fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_rejects_invalid_and_duplicate_aus() {
        assert!(AnnotationRecord::new("a", "s", FeClass::Fear, &[5]).is_err());
        assert!(AnnotationRecord::new("a", "s", FeClass::Fear, &[4, 4]).is_err());
        assert!(AnnotationRecord::new("a", "s", FeClass::Fear, &[1, 2, 4]).is_ok());
    }

    #[test]
    fn annotation_json_shape() {
        let line = r#"{"image_id":"img1","subject_id":"s1","fe_label":"Happiness","au_set":[6,12]}"#;
        let r: AnnotationRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.fe_label, FeClass::Happiness);
        assert_eq!(serde_json::to_string(&r).unwrap(), line);
    }
}
