//! Synthetic faces and the small corpora used for pretraining and the
//! memorization check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::trainer::Example;
use crate::error::Result;
use crate::instructions::{CANONICAL_AUD_PROMPT, CANONICAL_FER_PROMPT};
use crate::labels::{render_aus, FeClass};
use crate::region_cropper::ImageTensor;

/// A deterministic `side x side` image: a colored background gradient with
/// a few soft blobs, all drawn from `seed`.
pub fn synthetic_face(seed: u64, side: usize) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
    ];
    let tilt: [f64; 3] = [
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-0.3..0.3),
    ];
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.15..0.85),
                rng.gen_range(0.15..0.85),
                rng.gen_range(0.05..0.2),
                [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ],
            )
        })
        .collect();
    let s = side as f64;
    ImageTensor::from_fn(side, side, |y, x, c| {
        let (fy, fx) = (y as f64 / s, x as f64 / s);
        let mut v = base[c] + tilt[c] * (fx - fy);
        for &(cy, cx, r, color) in &blobs {
            let d2 = (fy - cy).powi(2) + (fx - cx).powi(2);
            v += color[c] * (-d2 / (2.0 * r * r)).exp();
        }
        v.clamp(0.0, 1.0)
    })
}

/// The short answer the trained model gives to the expression question.
pub fn fer_answer(label: FeClass) -> String {
    format!("{}.", label.name())
}

/// The short answer the trained model gives to the AU question.
pub fn aud_answer(aus: &[u8]) -> String {
    format!("Activated: {}.", render_aus(aus))
}

/// Labelled synthetic faces for the memorization corpus. The AU sets
/// together cover all twelve scored AUs.
pub fn memorization_faces() -> Vec<(String, FeClass, Vec<u8>)> {
    vec![
        ("toy-0".into(), FeClass::Surprise, vec![1, 2, 4]),
        ("toy-1".into(), FeClass::Happiness, vec![6, 7, 10, 12]),
        ("toy-2".into(), FeClass::Sadness, vec![15, 23, 24]),
        ("toy-3".into(), FeClass::Fear, vec![25, 26]),
    ]
}

/// Two examples per face: the canonical expression and AU questions.
pub fn memorization_corpus(side: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, (id, label, aus)) in memorization_faces().into_iter().enumerate() {
        let image = synthetic_face(1000 + i as u64, side)?;
        out.push(Example {
            image_id: id.clone(),
            image: image.clone(),
            question: CANONICAL_FER_PROMPT.into(),
            answer: fer_answer(label),
        });
        out.push(Example {
            image_id: id,
            image,
            question: CANONICAL_AUD_PROMPT.into(),
            answer: aud_answer(&aus),
        });
    }
    Ok(out)
}

pub const CAPTION_PROMPT: &str = "Give a short caption for this image.";

/// Caption-alignment set for the pretraining stage: one caption per
/// synthetic face naming its expression.
pub fn caption_corpus(count: usize, side: usize, seed: u64) -> Result<Vec<Example>> {
    (0..count)
        .map(|i| {
            let label = FeClass::ALL[i % FeClass::ALL.len()];
            Ok(Example {
                image_id: format!("caption-{i}"),
                image: synthetic_face(seed.wrapping_add(i as u64), side)?,
                question: CAPTION_PROMPT.into(),
                answer: format!("a face showing {}.", label.name().to_lowercase()),
            })
        })
        .collect()
}
