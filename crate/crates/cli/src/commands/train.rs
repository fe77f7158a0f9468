use std::collections::HashMap;
use std::path::Path;

use anyhow::{Context, Result};
use feallm_core::instructions::InstructionRecord;
use feallm_core::region_cropper::ImageTensor;
use feallm_core::training::corpus::caption_corpus;
use feallm_core::training::{train_stage, Checkpoint, Example, FeallmModel, Stage, Tokenizer};
use feallm_core::{jsonl, Error};
use serde_json::json;

use crate::config::{ConfigError, RunConfig};
use crate::imageio;

pub struct Args<'a> {
    pub stage: Stage,
    pub data: Option<&'a Path>,
    pub images: Option<&'a Path>,
    pub init: Option<&'a Path>,
    pub out: &'a Path,
    pub log: Option<&'a Path>,
}

fn instruction_examples(data: &Path, images: &Path) -> Result<Vec<Example>> {
    let records: Vec<InstructionRecord> = jsonl::read(data)?;
    let mut cache: HashMap<String, ImageTensor> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if !cache.contains_key(&r.image_id) {
            cache.insert(r.image_id.clone(), imageio::load_by_id(images, &r.image_id)?);
        }
        out.push(Example {
            image: cache[&r.image_id].clone(),
            image_id: r.image_id,
            question: r.question,
            answer: r.answer,
        });
    }
    Ok(out)
}

pub fn run(cfg: &RunConfig, args: Args<'_>) -> Result<()> {
    let instructions = match (args.data, args.images) {
        (Some(d), Some(i)) => Some(instruction_examples(d, i)?),
        (None, None) => None,
        _ => return Err(ConfigError("--data and --images go together".into()).into()),
    };
    let examples = match args.stage {
        Stage::Pretrain => caption_corpus(cfg.captions.count, cfg.captions.side, cfg.seed)?,
        Stage::Finetune => instructions
            .clone()
            .ok_or_else(|| ConfigError("stage 2 needs --data and --images".into()))?,
    };

    let (mut model, mut provenance) = match args.init {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            (ck.model, ck.provenance)
        }
        None => {
            let mut texts: Vec<&str> = Vec::new();
            for ex in examples.iter().chain(instructions.iter().flatten()) {
                texts.push(&ex.question);
                texts.push(&ex.answer);
            }
            let tokenizer = Tokenizer::from_corpus(texts);
            (FeallmModel::new(cfg.model.clone(), tokenizer, cfg.seed)?, Vec::new())
        }
    };

    let stage_cfg = cfg.stage(args.stage);
    let log = train_stage(&mut model, &examples, &stage_cfg, cfg.seed)?;
    provenance.push(log.record());

    Checkpoint {
        model,
        provenance,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    }
    .save(args.out)?;

    let log_path = args
        .log
        .map_or_else(|| args.out.with_extension("log.jsonl"), Path::to_path_buf);
    let mut lines: Vec<serde_json::Value> = log.steps.iter().map(|s| json!(s)).collect();
    if let Some(a) = &log.aborted {
        lines.push(json!({ "aborted": a }));
    }
    let mut meta = cfg.meta("train");
    meta["stage"] = json!(args.stage.number());
    jsonl::write(&log_path, Some(&meta), &lines).context("cannot write training log")?;

    println!(
        "stage {}: {} steps, final loss {}",
        args.stage.number(),
        log.steps.len(),
        log.final_loss().map_or("n/a".to_string(), |l| format!("{l:.6}"))
    );
    if let Some(a) = log.aborted {
        return Err(Error::TrainingAborted {
            step: a.step,
            reason: a.reason,
        }
        .into());
    }
    Ok(())
}
