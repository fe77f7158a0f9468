use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, StructuredDescription};
use crate::labels::{au_mentions, is_valid_au, FeClass};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub image_id: String,
    /// The label word appears in the emotion summary.
    pub label_in_summary: bool,
    /// Annotated AUs that the movement description never mentions.
    pub missing_aus: Vec<u8>,
    /// Annotated-vocabulary AUs mentioned in the movement description but not
    /// active on this face.
    pub extraneous_aus: Vec<u8>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.label_in_summary && self.missing_aus.is_empty() && self.extraneous_aus.is_empty()
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.label_in_summary {
            out.push("emotion label missing from summary".to_string());
        }
        if !self.missing_aus.is_empty() {
            out.push(format!("movement omits {:?}", self.missing_aus));
        }
        if !self.extraneous_aus.is_empty() {
            out.push(format!("movement mentions inactive {:?}", self.extraneous_aus));
        }
        out
    }
}

fn label_regex(label: FeClass) -> &'static Regex {
    static RES: OnceLock<Vec<Regex>> = OnceLock::new();
    let all = RES.get_or_init(|| {
        FeClass::ALL
            .iter()
            .map(|c| Regex::new(&format!(r"(?i)\b{}\b", c.name())).expect("valid pattern"))
            .collect()
    });
    &all[FeClass::ALL.iter().position(|c| *c == label).expect("listed")]
}

pub fn validate_description(desc: &StructuredDescription, record: &AnnotationRecord) -> ValidationReport {
    let active = record.aus();
    let mentioned = au_mentions(&desc.facial_movement);
    ValidationReport {
        image_id: record.image_id.clone(),
        label_in_summary: label_regex(record.fe_label).is_match(&desc.emotion_summary),
        missing_aus: active.iter().copied().filter(|a| !mentioned.contains(a)).collect(),
        extraneous_aus: mentioned
            .iter()
            .copied()
            .filter(|&a| is_valid_au(a) && !active.contains(&a))
            .collect(),
    }
}
