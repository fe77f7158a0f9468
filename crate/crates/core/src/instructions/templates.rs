use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::InstructionType;
use crate::error::{Error, Result};

pub const CANONICAL_FER_PROMPT: &str = "Please describe the expression in this face.";
pub const CANONICAL_AUD_PROMPT: &str = "Please describe the action units in this face.";
pub const MIN_TEMPLATES: usize = 10;

/// Question templates per instruction type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub summary: Vec<String>,
    pub movement: Vec<String>,
    pub reasoning: Vec<String>,
}

impl Default for TemplateBank {
    fn default() -> Self {
        toml::from_str(include_str!("../../data/templates.toml")).expect("bundled templates parse")
    }
}

impl TemplateBank {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("template bank: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable")
    }

    pub fn templates(&self, kind: InstructionType) -> &[String] {
        match kind {
            InstructionType::Summary => &self.summary,
            InstructionType::Movement => &self.movement,
            InstructionType::Reasoning => &self.reasoning,
        }
    }

    /// Uniform draw from one section. Empty sections are rejected.
    pub fn sample(&self, kind: InstructionType, rng: &mut impl Rng) -> Result<&str> {
        let list = self.templates(kind);
        if list.is_empty() {
            return Err(Error::Invalid(format!(
                "template bank has no {} questions",
                kind.name()
            )));
        }
        Ok(&list[rng.gen_range(0..list.len())])
    }

    /// Checks a bank meant for dataset building: at least ten templates per
    /// type and both benchmark prompts present.
    pub fn validate_full(&self) -> Result<()> {
        for kind in InstructionType::ALL {
            let n = self.templates(kind).len();
            if n < MIN_TEMPLATES {
                return Err(Error::Invalid(format!(
                    "{} section has {n} templates, need at least {MIN_TEMPLATES}",
                    kind.name()
                )));
            }
        }
        if !self.summary.iter().any(|t| t == CANONICAL_FER_PROMPT) {
            return Err(Error::Invalid(format!(
                "summary section lacks {CANONICAL_FER_PROMPT:?}"
            )));
        }
        if !self.movement.iter().any(|t| t == CANONICAL_AUD_PROMPT) {
            return Err(Error::Invalid(format!(
                "movement section lacks {CANONICAL_AUD_PROMPT:?}"
            )));
        }
        Ok(())
    }
}
