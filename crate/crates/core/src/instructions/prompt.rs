use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, StructuredDescription};
use crate::error::{Error, Result};
use crate::labels::render_aus;

/// System message sent ahead of every generation prompt so the reply can be
/// split deterministically.
pub const FORMAT_PREAMBLE: &str = "Answer in exactly three sections, each starting on its own line \
with its header: [SUMMARY] for the one-word emotional label followed by the one-sentence description \
of the expression, [MOVEMENT] for the facial movements, and [REASONING] for how the emotion follows \
from the action units. Refer to action units as AU followed by their number.";

const PROMPT_TEMPLATE: &str = "<Image> The facial image expresses the emotion of <fe_label>, and the \
following Action Units (AUs) are activated: <au_label>. Please directly state the emotional label of \
the image with only one word, and then briefly describe the facial expression of the person in the \
image in one sentence to help understand the emotion. And then describe the character's facial \
movements based on the image and the activation of the AUs. Finally, explain how to derive the \
character's emotions from the AUs.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPrompt {
    pub image_id: String,
    pub system: String,
    pub prompt: String,
    /// Set when the record has no active AUs and the slot reads "none".
    pub empty_aus: bool,
}

pub fn build_generation_prompt(record: &AnnotationRecord) -> Result<GenerationPrompt> {
    record.validate()?;
    let prompt = PROMPT_TEMPLATE
        .replace("<fe_label>", record.fe_label.name())
        .replace("<au_label>", &render_aus(&record.au_set));
    Ok(GenerationPrompt {
        image_id: record.image_id.clone(),
        system: FORMAT_PREAMBLE.to_string(),
        prompt,
        empty_aus: record.au_set.is_empty(),
    })
}

const HEADERS: [&str; 3] = ["SUMMARY", "MOVEMENT", "REASONING"];

/// Split generated text on the `[SUMMARY]`, `[MOVEMENT]` and `[REASONING]`
/// headers, in any order. Text before the first header is ignored.
pub fn parse_structured_description(text: &str) -> Result<StructuredDescription> {
    let mut found: Vec<(usize, usize, usize)> = Vec::new(); // (start, body start, header idx)
    for (idx, h) in HEADERS.iter().enumerate() {
        let tag = format!("[{h}]");
        let hits: Vec<usize> = text.match_indices(&tag).map(|(i, _)| i).collect();
        match hits.len() {
            0 => return Err(Error::Parse(format!("missing section {h}"))),
            1 => found.push((hits[0], hits[0] + tag.len(), idx)),
            n => return Err(Error::Parse(format!("section {h} appears {n} times"))),
        }
    }
    found.sort_by_key(|f| f.0);
    let mut bodies = [String::new(), String::new(), String::new()];
    for (i, &(_, body_start, idx)) in found.iter().enumerate() {
        let end = found.get(i + 1).map(|f| f.0).unwrap_or(text.len());
        let body = text[body_start..end].trim();
        if body.is_empty() {
            return Err(Error::Parse(format!("section {} is empty", HEADERS[idx])));
        }
        bodies[idx] = body.to_string();
    }
    let [emotion_summary, facial_movement, emotion_reasoning] = bodies;
    Ok(StructuredDescription {
        emotion_summary,
        facial_movement,
        emotion_reasoning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::FeClass;

    #[test]
    fn substitutes_labels() {
        let r = AnnotationRecord::new("x", "s", FeClass::Happiness, &[12, 6]).unwrap();
        let p = build_generation_prompt(&r).unwrap();
        assert!(p.prompt.contains("emotion of Happiness,"));
        assert!(p.prompt.contains("activated: AU6, AU12."));
        assert!(p.prompt.starts_with("<Image> The facial image expresses"));
        assert!(p.prompt.contains("Please directly state the emotional label"));
        assert!(!p.empty_aus);
    }

    #[test]
    fn empty_aus_render_none() {
        let r = AnnotationRecord::new("x", "s", FeClass::Neutral, &[]).unwrap();
        let p = build_generation_prompt(&r).unwrap();
        assert!(p.prompt.contains("activated: none."));
        assert!(p.empty_aus);
    }

    #[test]
    fn parses_three_sections() {
        let d = parse_structured_description(
            "[SUMMARY] Happiness. A smile.\n[MOVEMENT] AU12 pulls the lips.\n[REASONING] AU12 means joy.",
        )
        .unwrap();
        assert_eq!(d.emotion_summary, "Happiness. A smile.");
        assert_eq!(d.facial_movement, "AU12 pulls the lips.");
        assert_eq!(d.emotion_reasoning, "AU12 means joy.");
    }

    #[test]
    fn sections_in_any_order() {
        let d = parse_structured_description("[REASONING] r\n[SUMMARY] s\n[MOVEMENT] m").unwrap();
        assert_eq!((d.emotion_summary.as_str(), d.facial_movement.as_str()), ("s", "m"));
        assert_eq!(d.emotion_reasoning, "r");
    }

    #[test]
    fn missing_empty_and_duplicate_sections() {
        let e = parse_structured_description("[SUMMARY] s [MOVEMENT] m").unwrap_err();
        assert!(e.to_string().contains("REASONING"), "{e}");
        let e = parse_structured_description("[SUMMARY] s [MOVEMENT]   [REASONING] r").unwrap_err();
        assert!(e.to_string().contains("MOVEMENT"), "{e}");
        let e = parse_structured_description("[SUMMARY] s [MOVEMENT] m [REASONING] r [SUMMARY] t").unwrap_err();
        assert!(e.to_string().contains("SUMMARY"), "{e}");
    }
}
