//! `prockt`: synthetic data, proficiency extraction, training, evaluation
//! and reporting for process-aware knowledge tracing.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime
//! failure.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use commands::Settings;
use config::{read_config_file, resolve, ConfigFile};
use error::CliError;
use manifest::{RunManifest, SubSeeds};

#[derive(Parser, Debug)]
#[command(name = "prockt", version, about = "Process-aware knowledge tracing toolkit")]
struct Cli {
    /// TOML settings file. Top-level keys apply to every command, a
    /// `[<command>]` table to one command; flags override both.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Where to write the run manifest (default depends on the command).
    #[arg(long, global = true, value_name = "FILE")]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with known learning dynamics.
    Synth(SynthFlags),
    /// Annotate interactions with proficiency ratios via the three-stage LLM pipeline.
    ExtractMp(ExtractFlags),
    /// Train a model and write checkpoint, metrics and history.
    Train(TrainFlags),
    /// Score a checkpoint on the test split of a dataset.
    Eval(EvalFlags),
    /// Tabulate original vs. statuskt test metrics per backbone.
    Report(ReportFlags),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckFlags),
    /// Rerun a command from its manifest.
    Replay {
        /// Manifest written by an earlier run.
        manifest_file: PathBuf,
    },
}

#[derive(Args, Debug, Serialize)]
struct SynthFlags {
    /// Output directory for problems.json and interactions.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_students: Option<usize>,
    #[arg(long)]
    num_problems: Option<usize>,
    #[arg(long)]
    num_concepts: Option<usize>,
    #[arg(long)]
    steps_per_student: Option<usize>,
    /// Mastery gain per practice.
    #[arg(long)]
    learn_rate: Option<f64>,
    #[arg(long)]
    guess: Option<f64>,
    #[arg(long)]
    slip: Option<f64>,
    /// Noise on the simulated proficiency ratios.
    #[arg(long)]
    mp_noise_sd: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct ExtractFlags {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Completion cache and audit directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Output directory for the annotated dataset [default: <cache>/annotated].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Chat backend; `http` reads PROCKT_CHAT_URL, PROCKT_CHAT_MODEL and PROCKT_API_KEY.
    #[arg(long, value_parser = ["http", "mock"])]
    client: Option<String>,
    /// Maximum concurrent client calls.
    #[arg(long)]
    concurrency: Option<usize>,
    /// Attempts per stage before an interaction is flagged.
    #[arg(long)]
    max_retries: Option<u32>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Re-attempt interactions flagged by an earlier run.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    retry_failed: Option<bool>,
}

#[derive(Args, Debug, Serialize)]
struct TrainFlags {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["recurrent", "attention"])]
    backbone: Option<String>,
    #[arg(long, value_parser = ["original", "statuskt"])]
    variant: Option<String>,
    /// Weight of the proficiency term in the loss.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Search the learning-rate x dropout grid and keep the best validation AUC.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    grid: Option<bool>,
    /// Also search over these alpha values with --grid.
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    /// Hidden width [default: 200 recurrent, 256 attention].
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    attention_heads: Option<usize>,
    /// Window length; longer sequences are split.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs without validation AUC improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct EvalFlags {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Metrics file [default: eval.json next to the checkpoint].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ReportFlags {
    /// Directory searched recursively for metrics.json files.
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Markdown output [default: <runs>/report.md].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckFlags {
    /// JSON results [default: gradcheck.json].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn settings(command: Command, file: Option<&ConfigFile>) -> Result<Settings, CliError> {
    Ok(match command {
        Command::Synth(f) => Settings::Synth(resolve("synth", commands::synth_defaults(), &[], file, &f)?),
        Command::ExtractMp(f) => {
            Settings::ExtractMp(resolve("extract-mp", commands::extract_defaults(), &["out"], file, &f)?)
        }
        Command::Train(f) => Settings::Train(resolve(
            "train",
            commands::train_defaults(),
            &["embed_dim", "alpha_grid"],
            file,
            &f,
        )?),
        Command::Eval(f) => Settings::Eval(resolve("eval", commands::eval_defaults(), &["out"], file, &f)?),
        Command::Report(f) => Settings::Report(resolve("report", commands::report_defaults(), &["out"], file, &f)?),
        Command::Gradcheck(f) => Settings::Gradcheck(resolve("gradcheck", commands::gradcheck_defaults(), &[], file, &f)?),
        Command::Replay { manifest_file } => {
            let m = manifest::read(&manifest_file).map_err(|e| CliError::Usage(format!("{e:#}")))?;
            serde_json::from_value(serde_json::json!({"command": m.command, "config": m.config}))
                .map_err(|e| CliError::Validation(format!("manifest: {e}")))?
        }
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref().map(read_config_file).transpose()?;
    let mut inputs_extra = Vec::new();
    if let Some(c) = &cli.config {
        inputs_extra.push(c.clone());
    }
    let settings = settings(cli.command, file.as_ref())?;
    let started_at = manifest::now();
    let out = settings.run()?;
    let mut inputs = out.inputs;
    inputs.extend(inputs_extra);
    let value = serde_json::to_value(&settings).expect("serializable");
    let manifest = RunManifest {
        command: settings.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        argv: std::env::args().collect(),
        config: value["config"].clone(),
        seed: out.seed,
        sub_seeds: SubSeeds::new(out.seed),
        input_hash: manifest::hash_inputs(&inputs)?,
        inputs,
        started_at,
        finished_at: manifest::now(),
        outputs: out.outputs,
    };
    let path = cli.manifest.unwrap_or(out.manifest);
    manifest::write(&path, &manifest)?;
    log::info!("manifest: {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}
