use super::model::{FeallmModel, PreparedImage};
use super::tokenizer::EOS_ID;
use crate::error::{Error, Result};
use crate::region_cropper::ImageTensor;

/// Greedy decoding until the end token or `max_tokens`.
pub fn generate(model: &FeallmModel, image: &ImageTensor, question: &str, max_tokens: usize) -> Result<String> {
    let prepared = model.prepare(image)?;
    generate_prepared(model, &prepared, question, max_tokens)
}

pub fn generate_prepared(
    model: &FeallmModel,
    image: &PreparedImage,
    question: &str,
    max_tokens: usize,
) -> Result<String> {
    let ids = generate_ids(model, image, question, max_tokens)?;
    Ok(model.tokenizer.decode(&ids))
}

/// Generated token ids, without the end token.
pub fn generate_ids(
    model: &FeallmModel,
    image: &PreparedImage,
    question: &str,
    max_tokens: usize,
) -> Result<Vec<usize>> {
    let instruction = model.instruction_ids(question);
    let prefix_len = model.layout(instruction.len(), 0).prefix_len();
    let required = prefix_len + max_tokens.saturating_sub(1);
    if required > model.config.lm.context {
        return Err(Error::Invalid(format!(
            "generation needs {required} positions ({prefix_len} prompt + {max_tokens} new tokens) but the context holds {}",
            model.config.lm.context
        )));
    }
    if max_tokens == 0 {
        return Ok(Vec::new());
    }
    let prefix = model.prefix(image, &instruction)?;
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let logits = model.logits_after(&prefix, &out, true)?;
        let last = logits.row(logits.rows() - 1);
        let next = argmax(last);
        if next == EOS_ID {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
