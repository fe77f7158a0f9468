use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use feallm_core::instructions::client::{
    CachedGenerator, FixtureGenerator, HttpChatGenerator, RetryPolicy, TextGenerator,
};
use feallm_core::instructions::{build_dataset, split_dataset, AnnotationRecord, BuildOptions, TemplateBank};
use feallm_core::{jsonl, Error};
use serde_json::json;

use crate::config::{ConfigError, RunConfig};

pub struct Args<'a> {
    pub annotations: &'a Path,
    pub out: &'a Path,
    pub cache: Option<&'a Path>,
    pub fixture_dir: Option<&'a Path>,
    pub jobs: usize,
}

pub fn template_bank(cfg: &RunConfig) -> Result<TemplateBank> {
    match &cfg.dataset.templates {
        Some(path) => {
            let bank = TemplateBank::load(path).map_err(|e| ConfigError(e.to_string()))?;
            bank.validate_full()
                .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            Ok(bank)
        }
        None => Ok(TemplateBank::default()),
    }
}

fn generator(fixture_dir: Option<&Path>) -> Result<Box<dyn TextGenerator>> {
    Ok(match fixture_dir {
        Some(dir) => Box::new(FixtureGenerator::new(dir)),
        None => Box::new(HttpChatGenerator::from_env().map_err(|e| ConfigError(e.to_string()))?),
    })
}

/// Generate, validate, assemble and split. Everything that succeeded is
/// written even when some generation calls failed.
pub fn run(cfg: &RunConfig, args: Args<'_>) -> Result<()> {
    let records: Vec<AnnotationRecord> = jsonl::read(args.annotations)?;
    let bank = template_bank(cfg)?;
    let cache_dir: PathBuf = args.cache.map_or_else(|| args.out.join("cache"), Path::to_path_buf);
    let retry = RetryPolicy {
        attempts: cfg.dataset.retry_attempts,
        base_delay: Duration::from_millis(cfg.dataset.retry_base_ms),
    };
    let client = CachedGenerator::new(generator(args.fixture_dir)?, &cache_dir, retry)?;
    let build = build_dataset(
        &records,
        &client,
        &bank,
        BuildOptions {
            seed: cfg.seed,
            jobs: args.jobs,
        },
    )?;

    let meta = cfg.meta("build-dataset");
    let out = args.out;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    jsonl::write(&out.join("instructions.jsonl"), Some(&meta), &build.instructions)?;
    jsonl::write(&out.join("validation.jsonl"), Some(&meta), &build.reports)?;
    jsonl::write(&out.join("quarantine.jsonl"), Some(&meta), &build.quarantined)?;
    jsonl::write(&out.join("failed.jsonl"), Some(&meta), &build.failed)?;

    let eval_count = cfg
        .dataset
        .eval_count
        .unwrap_or_else(|| (build.validated.len() as f64 / 5.0).round().max(1.0) as usize);
    let split = split_dataset(&build.validated, eval_count, cfg.seed);
    let (train_n, eval_n) = match &split {
        Ok((train, eval)) => {
            jsonl::write(&out.join("split_train.jsonl"), Some(&meta), train)?;
            jsonl::write(&out.join("split_eval.jsonl"), Some(&meta), eval)?;
            for (name, side) in [("train_instructions.jsonl", train), ("eval_instructions.jsonl", eval)] {
                let ids: BTreeSet<&str> = side.iter().map(|r| r.image_id.as_str()).collect();
                let subset: Vec<_> = build
                    .instructions
                    .iter()
                    .filter(|i| ids.contains(i.image_id.as_str()))
                    .collect();
                jsonl::write(&out.join(name), Some(&meta), &subset)?;
            }
            (train.len(), eval.len())
        }
        Err(_) => (0, 0),
    };

    let summary = json!({
        "meta": meta,
        "input_records": records.len(),
        "validated": build.validated.len(),
        "quarantined": build.quarantined.len(),
        "failed": build.failed.len(),
        "instructions": build.instructions.len(),
        "generator_calls": client.calls(),
        "train_records": train_n,
        "eval_records": eval_n,
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")
        .context("cannot write summary")?;
    println!(
        "{} records: {} validated, {} quarantined, {} failed; {} instructions; {} generator calls",
        records.len(),
        build.validated.len(),
        build.quarantined.len(),
        build.failed.len(),
        build.instructions.len(),
        client.calls()
    );

    if !build.failed.is_empty() {
        let ids: Vec<&str> = build.failed.iter().map(|f| f.image_id.as_str()).collect();
        return Err(Error::Client(format!("generation failed for {}", ids.join(", "))).into());
    }
    split.map(|_| ()).context("cannot split the validated records")
}
