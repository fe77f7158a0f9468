use std::path::Path;

use anyhow::{Context, Result};
use feallm_core::feabench::{
    evaluate_responses, sample_prompt, DatasetAdapter, EvalTask, GroundTruthRecord, MetricsReport, ResponseRecord,
    TaskKind,
};
use feallm_core::instructions::record_seed;
use feallm_core::jsonl;
use feallm_core::training::{generate, Checkpoint};
use rayon::prelude::*;
use serde_json::json;

use super::dataset::template_bank;
use crate::config::RunConfig;
use crate::imageio;

pub struct Args<'a> {
    pub checkpoint: &'a Path,
    pub truth: &'a Path,
    pub images: &'a Path,
    pub task: TaskKind,
    pub adapter: DatasetAdapter,
    pub out: &'a Path,
    pub responses: Option<&'a Path>,
    pub jobs: usize,
}

fn write_report(
    cfg: &RunConfig,
    command: &str,
    out: &Path,
    task: &EvalTask,
    adapter: DatasetAdapter,
    samples: usize,
    report: &MetricsReport,
) -> Result<()> {
    let doc = json!({
        "meta": cfg.meta(command),
        "task": task.kind,
        "adapter": adapter,
        "vocabulary": task.vocabulary,
        "samples": samples,
        "report": report,
        "table": report.render_table(),
    });
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&doc)? + "\n")
        .with_context(|| format!("cannot write {}", out.display()))?;
    print!("{}", report.render_table());
    Ok(())
}

/// Ground truth for the adapter, frame-sampled when the dataset is video.
fn prepared_truth(path: &Path, task: TaskKind, adapter: DatasetAdapter) -> Result<(EvalTask, Vec<GroundTruthRecord>)> {
    let eval_task = adapter.task(task)?;
    let truth: Vec<GroundTruthRecord> = jsonl::read(path)?;
    Ok((eval_task, adapter.prepare(&truth)?))
}

/// Generate an answer per sampled record, extract predictions and score.
pub fn run(cfg: &RunConfig, args: Args<'_>) -> Result<()> {
    let (task, truth) = prepared_truth(args.truth, args.task, args.adapter)?;
    let model = Checkpoint::load(args.checkpoint)?.model;
    let bank = template_bank(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .context("cannot start worker pool")?;
    let responses: Vec<ResponseRecord> = pool.install(|| {
        truth
            .par_iter()
            .map(|t| -> Result<ResponseRecord> {
                let image = imageio::load_by_id(args.images, &t.image_id)?;
                let question = sample_prompt(task.kind, &bank, record_seed(cfg.seed, &t.image_id))?;
                let response = generate(&model, &image, &question, cfg.evaluate.max_tokens)?;
                Ok(ResponseRecord {
                    image_id: t.image_id.clone(),
                    task: task.kind,
                    question,
                    response,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let responses_path = args
        .responses
        .map_or_else(|| args.out.with_extension("responses.jsonl"), Path::to_path_buf);
    jsonl::write(&responses_path, Some(&cfg.meta("evaluate")), &responses)?;
    let report = evaluate_responses(&responses, &truth, &task)?;
    write_report(cfg, "evaluate", args.out, &task, args.adapter, truth.len(), &report)
}

/// Score a stored response file without running the model.
pub fn score(
    cfg: &RunConfig,
    responses: &Path,
    truth: &Path,
    task: TaskKind,
    adapter: DatasetAdapter,
    out: &Path,
) -> Result<()> {
    let (task, truth) = prepared_truth(truth, task, adapter)?;
    let responses: Vec<ResponseRecord> = jsonl::read(responses)?;
    let report = evaluate_responses(&responses, &truth, &task)?;
    write_report(cfg, "score-responses", out, &task, adapter, truth.len(), &report)
}
