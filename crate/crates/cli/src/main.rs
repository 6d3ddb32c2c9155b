//! `protoguide`: prepare data, learn prototypes, train and sample the
//! conditional denoiser, and evaluate synthetic images downstream.

mod config;
mod error;
mod run;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Mode, Overrides, RunConfig};
use error::CliError;
use stages::Ctx;

#[derive(Parser)]
#[command(name = "protoguide", version, about = "Prototype-guided conditional diffusion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured conditioning mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,

    /// Redo a stage that already completed.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset manifest and extract training embeddings.
    Prepare,
    /// Learn the class prototype codebook from the embeddings.
    TrainPrototypes,
    /// Train the conditional denoiser, resuming from the latest checkpoint.
    TrainDiffusion,
    /// Generate images for every class.
    Sample,
    /// Write labeling tasks for expert review of the samples.
    ExportAnnotations,
    /// Train the downstream classifier and score it on the holdout split.
    Eval,
    /// Report metric deltas between two evaluation reports.
    Compare {
        /// Reference report; defaults to this run's baseline_cfg evaluation.
        #[arg(long)]
        a: Option<PathBuf>,
        /// Report compared against the reference; defaults to this run's prototype_guided evaluation.
        #[arg(long)]
        b: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let path = cli.config.ok_or_else(|| CliError::Config("--config <file> is required".into()))?;
    let overrides =
        Overrides { seed: cli.seed, mode: cli.mode, output_root: std::env::var_os("PROTOGUIDE_OUT").map(PathBuf::from) };
    let cfg = RunConfig::load(&path, overrides)?;
    let ctx = Ctx::new(&cfg, cli.force);
    match cli.command {
        Command::Prepare => stages::prepare(&ctx),
        Command::TrainPrototypes => stages::train_prototypes_stage(&ctx),
        Command::TrainDiffusion => stages::train_diffusion(&ctx),
        Command::Sample => stages::sample(&ctx),
        Command::ExportAnnotations => stages::export_annotations_stage(&ctx),
        Command::Eval => stages::eval(&ctx),
        Command::Compare { a, b } => stages::compare(&ctx, a.as_deref(), b.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(dir) => {
            log::info!("done: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
