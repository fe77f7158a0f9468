use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::TextGenerator;
use super::{
    build_generation_prompt, make_instructions, parse_structured_description, validate_description, AnnotationRecord,
    InstructionRecord, TemplateBank, ValidationReport,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub seed: u64,
    pub jobs: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { seed: 0, jobs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantinedRecord {
    pub image_id: String,
    pub reasons: Vec<String>,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedRecord {
    pub image_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetBuild {
    pub validated: Vec<AnnotationRecord>,
    pub instructions: Vec<InstructionRecord>,
    pub reports: Vec<ValidationReport>,
    pub quarantined: Vec<QuarantinedRecord>,
    /// Records whose generation call failed after retries.
    pub failed: Vec<FailedRecord>,
}

enum Outcome {
    Valid(AnnotationRecord, Box<[InstructionRecord; 3]>, ValidationReport),
    Quarantined(QuarantinedRecord, Option<ValidationReport>),
    Failed(FailedRecord),
}

fn process(
    record: &AnnotationRecord,
    generator: &dyn TextGenerator,
    bank: &TemplateBank,
    seed: u64,
) -> Result<Outcome> {
    let prompt = build_generation_prompt(record)?;
    let response = match generator.generate(&prompt) {
        Ok(r) => r,
        Err(e) => {
            return Ok(Outcome::Failed(FailedRecord {
                image_id: record.image_id.clone(),
                error: e.to_string(),
            }))
        }
    };
    let desc = match parse_structured_description(&response) {
        Ok(d) => d,
        Err(e) => {
            return Ok(Outcome::Quarantined(
                QuarantinedRecord {
                    image_id: record.image_id.clone(),
                    reasons: vec![e.to_string()],
                    response,
                },
                None,
            ))
        }
    };
    let report = validate_description(&desc, record);
    if !report.passed() {
        return Ok(Outcome::Quarantined(
            QuarantinedRecord {
                image_id: record.image_id.clone(),
                reasons: report.failures(),
                response,
            },
            Some(report),
        ));
    }
    let instructions = make_instructions(&desc, record, bank, seed)?;
    Ok(Outcome::Valid(record.clone(), Box::new(instructions), report))
}

/// Generate, validate and assemble instructions for every record, fanning
/// out over `opts.jobs` workers. Output order follows input order.
pub fn build_dataset(
    records: &[AnnotationRecord],
    generator: &dyn TextGenerator,
    bank: &TemplateBank,
    opts: BuildOptions,
) -> Result<DatasetBuild> {
    for r in records {
        r.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("worker pool: {e}")))?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        records
            .par_iter()
            .map(|r| process(r, generator, bank, opts.seed))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut build = DatasetBuild::default();
    for outcome in outcomes {
        match outcome {
            Outcome::Valid(record, instructions, report) => {
                build.validated.push(record);
                build.instructions.extend(*instructions);
                build.reports.push(report);
            }
            Outcome::Quarantined(q, report) => {
                build.reports.extend(report);
                build.quarantined.push(q);
            }
            Outcome::Failed(f) => build.failed.push(f),
        }
    }
    Ok(build)
}
