use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AnnotationRecord;
use crate::error::{Error, Result};

/// Subject-level train/eval partition.
///
/// Subjects are shuffled under `seed`, stably sorted by record count
/// (largest first), and each is added to the eval side whenever that brings
/// the eval size closer to `eval_count`. Both sides always get at least one
/// subject. Record order within each side follows the input.
pub fn split_dataset(
    records: &[AnnotationRecord],
    eval_count: usize,
    seed: u64,
) -> Result<(Vec<AnnotationRecord>, Vec<AnnotationRecord>)> {
    let mut by_subject: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *by_subject.entry(r.subject_id.as_str()).or_default() += 1;
    }
    if by_subject.len() < 2 {
        return Err(Error::Invalid(format!(
            "subject-disjoint split needs at least two subjects, found {}",
            by_subject.len()
        )));
    }
    let mut subjects: Vec<(&str, usize)> = by_subject.into_iter().collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    subjects.sort_by_key(|s| std::cmp::Reverse(s.1));

    let target = eval_count as i64;
    let mut eval_size = 0i64;
    let mut in_eval = vec![false; subjects.len()];
    for (i, &(_, n)) in subjects.iter().enumerate() {
        let with = eval_size + n as i64;
        if (target - with).abs() < (target - eval_size).abs() {
            in_eval[i] = true;
            eval_size = with;
        }
    }
    if !in_eval.iter().any(|&e| e) {
        let last = subjects.len() - 1;
        in_eval[last] = true;
    }
    if in_eval.iter().all(|&e| e) {
        let last = subjects.len() - 1;
        in_eval[last] = false;
    }
    let eval_subjects: std::collections::BTreeSet<&str> = subjects
        .iter()
        .zip(&in_eval)
        .filter(|(_, &e)| e)
        .map(|((s, _), _)| *s)
        .collect();
    let (eval, train): (Vec<_>, Vec<_>) = records
        .iter()
        .cloned()
        .partition(|r| eval_subjects.contains(r.subject_id.as_str()));
    Ok((train, eval))
}
