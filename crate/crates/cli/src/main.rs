mod commands;
mod config;
mod imageio;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use feallm_core::feabench::{DatasetAdapter, TaskKind};
use feallm_core::training::Stage;

use config::{ConfigError, RunConfig};

/// Facial emotion analysis: region crops, instruction data, training and
/// benchmark scoring.
///
/// Exit codes: 0 success, 1 training aborted or other failure, 2 invalid
/// input, 3 text-generation service failure, 4 configuration error.
#[derive(Parser, Debug)]
#[command(name = "feallm", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for record-parallel steps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Read generator responses from `<dir>/<image_id>.txt` instead of the
    /// endpoint in FEALLM_ENDPOINT.
    #[arg(long, global = true)]
    fixture_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Fer,
    Aud,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AdapterArg {
    Feabench,
    Rafdb,
    Affectnet,
    Bp4d,
    Disfa,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Fer => TaskKind::Fer,
            TaskArg::Aud => TaskKind::Aud,
        }
    }
}

impl From<AdapterArg> for DatasetAdapter {
    fn from(a: AdapterArg) -> Self {
        match a {
            AdapterArg::Feabench => DatasetAdapter::Feabench,
            AdapterArg::Rafdb => DatasetAdapter::Rafdb,
            AdapterArg::Affectnet => DatasetAdapter::Affectnet,
            AdapterArg::Bp4d => DatasetAdapter::Bp4d,
            AdapterArg::Disfa => DatasetAdapter::Disfa,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the sixteen local regions of an image and their pixel windows.
    CropPreview {
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build instruction records from annotations and split them by subject.
    BuildDataset {
        /// JSONL of {image_id, subject_id, fe_label, au_set}.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Response cache; defaults to `<out>/cache`.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Run one training stage and write a checkpoint and step log.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Instruction JSONL (stage 2 training data; vocabulary in stage 1).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory of `<image_id>.png` files.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate answers with a checkpoint and score them.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL of {image_id, fe_label?, au_set?}.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "feabench")]
        adapter: AdapterArg,
        #[arg(long)]
        out: PathBuf,
        /// Where to store the generated answers.
        #[arg(long)]
        responses: Option<PathBuf>,
    },
    /// Score a stored response file.
    ScoreResponses {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "feabench")]
        adapter: AdapterArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::CropPreview { image, out } => commands::crop::run(&cfg, &image, &out),
        Command::BuildDataset {
            annotations,
            out,
            cache,
        } => commands::dataset::run(
            &cfg,
            commands::dataset::Args {
                annotations: &annotations,
                out: &out,
                cache: cache.as_deref(),
                fixture_dir: cli.fixture_dir.as_deref(),
                jobs: cli.jobs,
            },
        ),
        Command::Train {
            stage,
            data,
            images,
            init,
            out,
            log,
        } => commands::train::run(
            &cfg,
            commands::train::Args {
                stage: Stage::from_number(stage)?,
                data: data.as_deref(),
                images: images.as_deref(),
                init: init.as_deref(),
                out: &out,
                log: log.as_deref(),
            },
        ),
        Command::Evaluate {
            checkpoint,
            truth,
            images,
            task,
            adapter,
            out,
            responses,
        } => commands::evaluate::run(
            &cfg,
            commands::evaluate::Args {
                checkpoint: &checkpoint,
                truth: &truth,
                images: &images,
                task: task.into(),
                adapter: adapter.into(),
                out: &out,
                responses: responses.as_deref(),
                jobs: cli.jobs,
            },
        ),
        Command::ScoreResponses {
            responses,
            truth,
            task,
            adapter,
            out,
        } => commands::evaluate::score(&cfg, &responses, &truth, task.into(), adapter.into(), &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<feallm_core::Error>() {
            return match e {
                feallm_core::Error::Client(_) => 3,
                feallm_core::Error::TrainingAborted { .. } => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<image::ImageError>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
