use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{record_seed, AnnotationRecord, InstructionRecord, InstructionType, StructuredDescription, TemplateBank};
use crate::error::Result;
use crate::labels::au_mentions;

fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for i in 0..bytes.len() {
        let ends = matches!(bytes[i], b'.' | b'!' | b'?');
        let next_is_space = bytes.get(i + 1).is_none_or(|b| b.is_ascii_whitespace());
        if ends && next_is_space {
            let s = text[start..=i].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + 1;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Reorder reasoning sentences AU by AU: sentences are sorted by the smallest
/// AU they mention; sentences mentioning no AU keep their relative order and
/// move to the end.
pub fn resequence_reasoning(text: &str) -> String {
    let mut keyed: Vec<(Option<u8>, usize, &str)> = sentences(text)
        .into_iter()
        .enumerate()
        .map(|(i, s)| (au_mentions(s).first().copied(), i, s))
        .collect();
    keyed.sort_by_key(|&(au, i, _)| (au.is_none(), au, i));
    keyed.into_iter().map(|(_, _, s)| s).collect::<Vec<_>>().join(" ")
}

/// One record per instruction type, questions drawn uniformly from the bank
/// with a generator seeded by `seed` and the image id.
pub fn make_instructions(
    desc: &StructuredDescription,
    record: &AnnotationRecord,
    bank: &TemplateBank,
    seed: u64,
) -> Result<[InstructionRecord; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed, &record.image_id));
    let mut make = |kind: InstructionType, answer: String| -> Result<InstructionRecord> {
        Ok(InstructionRecord {
            image_id: record.image_id.clone(),
            kind,
            question: bank.sample(kind, &mut rng)?.to_string(),
            answer,
        })
    };
    Ok([
        make(InstructionType::Summary, desc.emotion_summary.clone())?,
        make(InstructionType::Movement, desc.facial_movement.clone())?,
        make(
            InstructionType::Reasoning,
            resequence_reasoning(&desc.emotion_reasoning),
        )?,
    ])
}
