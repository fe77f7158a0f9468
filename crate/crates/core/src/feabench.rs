//! Benchmark protocol: prompt sampling, free-text parsing, accuracy and
//! per-AU F1 scoring, plus the frame sampling and vocabulary filtering used
//! for external datasets.
//!
//! AU extraction does not model negation: "no AU4" still counts as an AU4
//! prediction. Answers produced by the trained model only list activated AUs,
//! but responses from chattier external models may need cleaning first.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instructions::{InstructionType, TemplateBank};
use crate::labels::{au_tokens, is_valid_au, AuSet, FeClass, VALID_AUS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Fer,
    Aud,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Fer => "fer",
            TaskKind::Aud => "aud",
        }
    }

    /// Template section the task's questions are drawn from.
    pub fn instruction_type(self) -> InstructionType {
        match self {
            TaskKind::Fer => InstructionType::Summary,
            TaskKind::Aud => InstructionType::Movement,
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fer" => Ok(TaskKind::Fer),
            "aud" => Ok(TaskKind::Aud),
            _ => Err(Error::Parse(format!("unknown task {s:?}, expected fer or aud"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTask {
    pub kind: TaskKind,
    pub vocabulary: Vec<u8>,
}

impl EvalTask {
    pub fn new(kind: TaskKind, vocabulary: &[u8]) -> Result<Self> {
        let vocab: AuSet = vocabulary.iter().copied().collect();
        if let Some(bad) = vocab.iter().find(|a| !is_valid_au(**a)) {
            return Err(Error::Invalid(format!("AU{bad} is outside the twelve scored AUs")));
        }
        if kind == TaskKind::Aud && vocab.is_empty() {
            return Err(Error::Invalid("AU task needs a non-empty vocabulary".into()));
        }
        Ok(Self {
            kind,
            vocabulary: vocab.into_iter().collect(),
        })
    }

    pub fn fer() -> Self {
        Self::new(TaskKind::Fer, &VALID_AUS).expect("valid")
    }

    pub fn aud() -> Self {
        Self::new(TaskKind::Aud, &VALID_AUS).expect("valid")
    }
}

/// Question for one evaluation sample; deterministic under `seed`.
pub fn sample_prompt(kind: TaskKind, bank: &TemplateBank, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    bank.sample(kind.instruction_type(), &mut rng).map(str::to_string)
}

fn fe_regex() -> &'static (Regex, HashMap<String, FeClass>) {
    static RE: OnceLock<(Regex, HashMap<String, FeClass>)> = OnceLock::new();
    RE.get_or_init(|| {
        let mut words = HashMap::new();
        for c in FeClass::ALL {
            words.insert(c.name().to_ascii_lowercase(), c);
            words.insert(c.inflection().to_string(), c);
        }
        let mut alts: Vec<&String> = words.keys().collect();
        // Longest first so "sadness" wins over "sad" at the same offset.
        alts.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        let pattern = alts.iter().map(|w| regex::escape(w)).collect::<Vec<_>>().join("|");
        let re = Regex::new(&format!(r"(?i)\b(?:{pattern})\b")).expect("valid pattern");
        (re, words)
    })
}

/// Emotion class mentioned earliest in `text`, by class name or adjective.
pub fn extract_fe(text: &str) -> Option<FeClass> {
    let (re, words) = fe_regex();
    let m = re.find(text)?;
    words.get(&m.as_str().to_ascii_lowercase()).copied()
}

/// `AU<k>` mentions in `text` whose index is in `vocabulary`.
pub fn extract_aus(text: &str, vocabulary: &[u8]) -> AuSet {
    au_tokens(text)
        .into_iter()
        .filter_map(|(_, k)| u8::try_from(k).ok())
        .filter(|k| vocabulary.contains(k))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FerMetrics {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub no_prediction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuMetrics {
    pub au: u8,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some ratio had a zero denominator and was scored as 0.
    pub degenerate: bool,
}

impl AuMetrics {
    pub fn from_counts(au: u8, tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: f64, den: f64| if den == 0.0 { None } else { Some(num / den) };
        let p = ratio(tp as f64, (tp + fp) as f64);
        let r = ratio(tp as f64, (tp + fn_) as f64);
        let f = match (p, r) {
            (Some(p), Some(r)) => ratio(2.0 * p * r, p + r),
            _ => None,
        };
        Self {
            au,
            tp,
            fp,
            fn_,
            precision: p.unwrap_or(0.0),
            recall: r.unwrap_or(0.0),
            f1: f.unwrap_or(0.0),
            degenerate: p.is_none() || r.is_none() || f.is_none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudMetrics {
    pub per_au: Vec<AuMetrics>,
    pub macro_f1: f64,
}

/// Arithmetic mean of per-AU F1 values.
pub fn macro_average(f1s: &[f64]) -> f64 {
    if f1s.is_empty() {
        return 0.0;
    }
    f1s.iter().sum::<f64>() / f1s.len() as f64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fer: Option<FerMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aud: Option<AudMetrics>,
}

impl MetricsReport {
    /// Range and macro-average consistency checks.
    pub fn check(&self) -> Result<()> {
        let in_unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Invalid(format!("{name} = {v} is outside [0, 1]")))
            }
        };
        if let Some(fer) = &self.fer {
            in_unit("accuracy", fer.accuracy)?;
        }
        if let Some(aud) = &self.aud {
            for m in &aud.per_au {
                in_unit("precision", m.precision)?;
                in_unit("recall", m.recall)?;
                in_unit("f1", m.f1)?;
            }
            in_unit("macro_f1", aud.macro_f1)?;
            let f1s: Vec<f64> = aud.per_au.iter().map(|m| m.f1).collect();
            if (macro_average(&f1s) - aud.macro_f1).abs() > 1e-9 {
                return Err(Error::Invalid("macro_f1 disagrees with per-AU F1 values".into()));
            }
        }
        Ok(())
    }

    /// Markdown table in percent with two decimals: FE accuracy, one column
    /// per AU, then the AU average.
    pub fn render_table(&self) -> String {
        let pct = |v: f64| format!("{:.2}", v * 100.0);
        let mut header = vec!["FE".to_string()];
        let mut row = vec![self.fer.as_ref().map_or("-".to_string(), |f| pct(f.accuracy))];
        if let Some(aud) = &self.aud {
            for m in &aud.per_au {
                header.push(format!("AU{}", m.au));
                row.push(pct(m.f1));
            }
            header.push("Avg.".into());
            row.push(pct(aud.macro_f1));
        }
        let mut out = String::new();
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
        let _ = writeln!(out, "| {} |", row.join(" | "));
        out
    }
}

fn check_lengths(preds: usize, truth: usize) -> Result<()> {
    if preds != truth {
        return Err(Error::Invalid(format!(
            "{preds} predictions but {truth} ground-truth labels"
        )));
    }
    Ok(())
}

/// Exact-match accuracy. A missing prediction is wrong.
pub fn score_fer(predictions: &[Option<FeClass>], truth: &[FeClass]) -> Result<FerMetrics> {
    check_lengths(predictions.len(), truth.len())?;
    let correct = predictions.iter().zip(truth).filter(|(p, t)| **p == Some(**t)).count();
    let total = truth.len();
    Ok(FerMetrics {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        no_prediction: predictions.iter().filter(|p| p.is_none()).count(),
    })
}

/// Per-AU confusion counts over `vocabulary`, F1 from the counts, and the
/// unweighted mean F1.
pub fn score_aud(predictions: &[AuSet], truth: &[AuSet], vocabulary: &[u8]) -> Result<AudMetrics> {
    check_lengths(predictions.len(), truth.len())?;
    let k = vocabulary.len();
    let counts = predictions
        .par_iter()
        .zip(truth.par_iter())
        .fold(
            || vec![[0usize; 3]; k],
            |mut acc, (p, t)| {
                for (j, au) in vocabulary.iter().enumerate() {
                    match (p.contains(au), t.contains(au)) {
                        (true, true) => acc[j][0] += 1,
                        (true, false) => acc[j][1] += 1,
                        (false, true) => acc[j][2] += 1,
                        (false, false) => {}
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![[0usize; 3]; k],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    for i in 0..3 {
                        x[i] += y[i];
                    }
                }
                a
            },
        );
    let per_au: Vec<AuMetrics> = vocabulary
        .iter()
        .zip(counts)
        .map(|(&au, [tp, fp, fn_])| AuMetrics::from_counts(au, tp, fp, fn_))
        .collect();
    let f1s: Vec<f64> = per_au.iter().map(|m| m.f1).collect();
    Ok(AudMetrics {
        macro_f1: macro_average(&f1s),
        per_au,
    })
}

/// Every `round(1/rate)`-th element, starting with the first.
pub fn uniform_sample<T: Clone>(items: &[T], rate: f64) -> Result<Vec<T>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Invalid(format!("sampling rate {rate} must be in (0, 1]")));
    }
    let stride = (1.0 / rate).round().max(1.0) as usize;
    Ok(items.iter().step_by(stride).cloned().collect())
}

/// AUs scored in both vocabularies, ascending.
pub fn filter_shared_aus(dataset_vocab: &[u8], model_vocab: &[u8]) -> Result<Vec<u8>> {
    let model: AuSet = model_vocab.iter().copied().collect();
    let shared: AuSet = dataset_vocab.iter().copied().filter(|a| model.contains(a)).collect();
    if shared.is_empty() {
        return Err(Error::Invalid(format!(
            "no AU shared between dataset {dataset_vocab:?} and model {model_vocab:?}"
        )));
    }
    Ok(shared.into_iter().collect())
}

pub const DISFA_AUS: [u8; 9] = [1, 2, 4, 5, 6, 9, 12, 25, 26];
pub const BP4D_AUS: [u8; 12] = [1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24];
pub const FRAME_SAMPLE_RATE: f64 = 0.02;

/// Evaluation datasets and how their ground truth is prepared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetAdapter {
    Feabench,
    Rafdb,
    Affectnet,
    Bp4d,
    Disfa,
}

impl DatasetAdapter {
    pub const ALL: [DatasetAdapter; 5] = [
        DatasetAdapter::Feabench,
        DatasetAdapter::Rafdb,
        DatasetAdapter::Affectnet,
        DatasetAdapter::Bp4d,
        DatasetAdapter::Disfa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetAdapter::Feabench => "feabench",
            DatasetAdapter::Rafdb => "rafdb",
            DatasetAdapter::Affectnet => "affectnet",
            DatasetAdapter::Bp4d => "bp4d",
            DatasetAdapter::Disfa => "disfa",
        }
    }

    pub fn supports(self, kind: TaskKind) -> bool {
        match self {
            DatasetAdapter::Feabench => true,
            DatasetAdapter::Rafdb | DatasetAdapter::Affectnet => kind == TaskKind::Fer,
            DatasetAdapter::Bp4d | DatasetAdapter::Disfa => kind == TaskKind::Aud,
        }
    }

    /// Video datasets are thinned before scoring.
    pub fn frame_sequential(self) -> bool {
        matches!(self, DatasetAdapter::Bp4d | DatasetAdapter::Disfa)
    }

    pub fn sample_rate(self) -> f64 {
        if self.frame_sequential() {
            FRAME_SAMPLE_RATE
        } else {
            1.0
        }
    }

    /// AUs annotated by the dataset.
    pub fn dataset_vocabulary(self) -> Vec<u8> {
        match self {
            DatasetAdapter::Bp4d => BP4D_AUS.to_vec(),
            DatasetAdapter::Disfa => DISFA_AUS.to_vec(),
            _ => VALID_AUS.to_vec(),
        }
    }

    /// Task definition for this dataset against the model's vocabulary.
    pub fn task(self, kind: TaskKind) -> Result<EvalTask> {
        if !self.supports(kind) {
            return Err(Error::Invalid(format!(
                "dataset {} has no {} labels",
                self.name(),
                kind.name()
            )));
        }
        let vocab = filter_shared_aus(&self.dataset_vocabulary(), &VALID_AUS)?;
        EvalTask::new(kind, &vocab)
    }

    /// Ground truth in scoring order after frame sampling.
    pub fn prepare(self, truth: &[GroundTruthRecord]) -> Result<Vec<GroundTruthRecord>> {
        uniform_sample(truth, self.sample_rate())
    }
}

impl FromStr for DatasetAdapter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetAdapter::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown dataset adapter {s:?}")))
    }
}

/// Evaluation label for one image. External datasets may carry only one of
/// the two labels and AUs beyond the scored twelve.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image_id: String,
    #[serde(default)]
    pub fe_label: Option<FeClass>,
    #[serde(default)]
    pub au_set: Option<Vec<u8>>,
}

/// One model answer to one evaluation question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub image_id: String,
    pub task: TaskKind,
    pub question: String,
    pub response: String,
}

/// Score stored responses against ground truth. Every ground-truth record
/// needs exactly one response for the task; extra responses are ignored.
pub fn evaluate_responses(
    responses: &[ResponseRecord],
    truth: &[GroundTruthRecord],
    task: &EvalTask,
) -> Result<MetricsReport> {
    let mut by_id: BTreeMap<&str, &ResponseRecord> = BTreeMap::new();
    for r in responses.iter().filter(|r| r.task == task.kind) {
        if by_id.insert(r.image_id.as_str(), r).is_some() {
            return Err(Error::Invalid(format!(
                "duplicate {} response for {}",
                task.kind.name(),
                r.image_id
            )));
        }
    }
    let response_for = |id: &str| {
        by_id
            .get(id)
            .map(|r| r.response.as_str())
            .ok_or_else(|| Error::Invalid(format!("no {} response for {id}", task.kind.name())))
    };
    let mut report = MetricsReport::default();
    match task.kind {
        TaskKind::Fer => {
            let mut preds = Vec::with_capacity(truth.len());
            let mut labels = Vec::with_capacity(truth.len());
            for t in truth {
                let label = t
                    .fe_label
                    .ok_or_else(|| Error::Invalid(format!("{} has no emotion label", t.image_id)))?;
                preds.push(extract_fe(response_for(&t.image_id)?));
                labels.push(label);
            }
            report.fer = Some(score_fer(&preds, &labels)?);
        }
        TaskKind::Aud => {
            let mut preds = Vec::with_capacity(truth.len());
            let mut labels = Vec::with_capacity(truth.len());
            for t in truth {
                let aus = t
                    .au_set
                    .as_ref()
                    .ok_or_else(|| Error::Invalid(format!("{} has no AU labels", t.image_id)))?;
                preds.push(extract_aus(response_for(&t.image_id)?, &task.vocabulary));
                labels.push(aus.iter().copied().filter(|a| task.vocabulary.contains(a)).collect());
            }
            report.aud = Some(score_aud(&preds, &labels, &task.vocabulary)?);
        }
    }
    report.check()?;
    Ok(report)
}
