use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use prockt_autodiff::gradcheck::{check_op, MAX_REL_ERROR, OPS};
use prockt_core::dataset::{load_dataset, save_dataset, Dataset, DatasetError, INTERACTIONS_FILE, PROBLEMS_FILE};
use prockt_core::experiment::{model_config, prepare, ModelShape};
use prockt_core::kt_models::{Backbone, KtModel, ModelError, Variant};
use prockt_core::mp_pipeline::{run_pipeline, ChatParams, HttpChatClient, MockChatClient, PipelineOptions};
use prockt_core::synthetic::{generate, SimConfig};
use prockt_core::training::{
    evaluate, grid_search, gradcheck_model, train, write_history_csv, write_metrics_json, RunMetrics, TrainConfig,
    TrainError, DROPOUT_GRID, LR_GRID, SEED,
};
use prockt_core::seeds;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::CliError;

/// What a command read and wrote, for the manifest.
pub struct RunOutput {
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Where the manifest goes unless `--manifest` says otherwise.
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", content = "config", rename_all = "kebab-case")]
pub enum Settings {
    Synth(SynthSettings),
    ExtractMp(ExtractSettings),
    Train(TrainSettings),
    Eval(EvalSettings),
    Report(ReportSettings),
    Gradcheck(GradcheckSettings),
}

impl Settings {
    pub fn name(&self) -> &'static str {
        match self {
            Settings::Synth(_) => "synth",
            Settings::ExtractMp(_) => "extract-mp",
            Settings::Train(_) => "train",
            Settings::Eval(_) => "eval",
            Settings::Report(_) => "report",
            Settings::Gradcheck(_) => "gradcheck",
        }
    }

    pub fn run(&self) -> Result<RunOutput, CliError> {
        match self {
            Settings::Synth(s) => synth(s),
            Settings::ExtractMp(s) => extract_mp(s),
            Settings::Train(s) => run_train(s),
            Settings::Eval(s) => eval(s),
            Settings::Report(s) => report(s),
            Settings::Gradcheck(s) => gradcheck(s),
        }
    }
}

fn require_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

/// The dataset files themselves, leaving out manifests kept alongside.
fn data_inputs(dir: &Path) -> Vec<PathBuf> {
    vec![dir.join(PROBLEMS_FILE), dir.join(INTERACTIONS_FILE)]
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    require_exists(dir, "data directory")?;
    load_dataset(dir).map_err(dataset_err)
}

fn dataset_err(e: DatasetError) -> CliError {
    match e {
        DatasetError::Io { .. } => CliError::runtime(e),
        other => CliError::Validation(other.to_string()),
    }
}

fn model_err(e: ModelError) -> CliError {
    match e {
        ModelError::Config(_) | ModelError::MaxLen { .. } => CliError::Validation(e.to_string()),
        other => CliError::runtime(other),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) => CliError::Validation(e.to_string()),
        TrainError::Model(m) => model_err(m),
        other => CliError::runtime(other),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::Runtime)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::Runtime)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSettings {
    pub out: PathBuf,
    /// `sim.seed` is the run seed; the simulator draws from its
    /// `simulator` sub-seed.
    #[serde(flatten)]
    pub sim: SimConfig,
}

pub fn synth_defaults() -> serde_json::Value {
    let mut v = serde_json::to_value(SimConfig::default()).expect("serializable");
    v["out"] = serde_json::Value::Null;
    v
}

fn synth(s: &SynthSettings) -> Result<RunOutput, CliError> {
    let cfg = SimConfig {
        seed: seeds::sub_seed(s.sim.seed, seeds::SIMULATOR),
        ..s.sim.clone()
    };
    cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    let out = generate(&cfg).map_err(CliError::runtime)?;
    create_dir(&s.out)?;
    save_dataset(&out.dataset, &s.out).map_err(dataset_err)?;
    log::info!(
        "wrote {} students, {} interactions to {}",
        out.dataset.sequences.len(),
        out.dataset.num_interactions(),
        s.out.display()
    );
    Ok(RunOutput {
        seed: s.sim.seed,
        inputs: vec![],
        outputs: vec![s.out.clone()],
        manifest: s.out.join("manifest.json"),
    })
}

// ---------------------------------------------------------------------------
// extract-mp
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractSettings {
    pub data: PathBuf,
    pub cache: PathBuf,
    /// Defaults to `<cache>/annotated`.
    pub out: Option<PathBuf>,
    pub client: String,
    pub concurrency: usize,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub retry_failed: bool,
    pub seed: u64,
}

pub fn extract_defaults() -> serde_json::Value {
    let params = ChatParams::default();
    json!({
        "data": null,
        "cache": null,
        "out": null,
        "client": "mock",
        "concurrency": 4,
        "max_retries": params.max_retries,
        "timeout_secs": params.timeout.as_secs(),
        "retry_failed": false,
        "seed": SEED,
    })
}

fn extract_mp(s: &ExtractSettings) -> Result<RunOutput, CliError> {
    let data = load_data(&s.data)?;
    if s.concurrency == 0 || s.max_retries == 0 {
        return Err(CliError::Validation("concurrency and max_retries must be at least 1".into()));
    }
    let mut opts = PipelineOptions::new(&s.cache);
    opts.concurrency = s.concurrency;
    opts.retry_failed = s.retry_failed;
    opts.params.max_retries = s.max_retries;
    opts.params.timeout = Duration::from_secs(s.timeout_secs);
    let result = match s.client.as_str() {
        "mock" => run_pipeline(&data, &MockChatClient::new(), &opts),
        "http" => run_pipeline(&data, &HttpChatClient::from_env(), &opts),
        other => return Err(CliError::Validation(format!("unknown client `{other}` (expected http or mock)"))),
    };
    let (annotated, report) = result.map_err(CliError::runtime)?;
    let out = s.out.clone().unwrap_or_else(|| s.cache.join("annotated"));
    create_dir(&out)?;
    save_dataset(&annotated, &out).map_err(dataset_err)?;
    let report_path = out.join("pipeline_report.json");
    write_json(&report_path, &report)?;
    log::info!(
        "annotated {}/{} interactions ({} client calls, {} cache hits)",
        report.annotated,
        report.interactions,
        report.client_calls,
        report.cache_hits
    );
    for f in &report.flagged {
        log::warn!("flagged {} / {} at {:?}: {}", f.student_id, f.problem_id, f.stage, f.error);
    }
    Ok(RunOutput {
        seed: s.seed,
        inputs: data_inputs(&s.data),
        outputs: vec![out.clone(), s.cache.join("audit")],
        manifest: out.join("manifest.json"),
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub data: PathBuf,
    pub out: PathBuf,
    pub backbone: Backbone,
    pub variant: Variant,
    pub alpha: f64,
    pub lr: f64,
    pub dropout: f64,
    pub grid: bool,
    pub lr_grid: Vec<f64>,
    pub dropout_grid: Vec<f64>,
    pub alpha_grid: Option<Vec<f64>>,
    /// Defaults to the backbone's standard width.
    pub embed_dim: Option<usize>,
    pub attention_heads: usize,
    pub max_len: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

pub fn train_defaults() -> serde_json::Value {
    let t = TrainConfig::default();
    json!({
        "data": null,
        "out": null,
        "backbone": null,
        "variant": null,
        "alpha": t.alpha,
        "lr": t.lr,
        "dropout": t.dropout,
        "grid": false,
        "lr_grid": LR_GRID,
        "dropout_grid": DROPOUT_GRID,
        "alpha_grid": null,
        "embed_dim": null,
        "attention_heads": prockt_core::kt_models::DEFAULT_HEADS,
        "max_len": prockt_core::dataset::DEFAULT_MAX_LEN,
        "batch_size": t.batch_size,
        "patience": t.patience,
        "max_epochs": t.max_epochs,
        "seed": t.seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    seed: u64,
    batch_size: usize,
    alpha: f64,
    lr: f64,
    dropout: f64,
    best_epoch: usize,
}

fn run_train(s: &TrainSettings) -> Result<RunOutput, CliError> {
    let data = load_data(&s.data)?;
    let cfg = TrainConfig {
        alpha: s.alpha,
        lr: s.lr,
        dropout: s.dropout,
        lr_grid: s.lr_grid.clone(),
        dropout_grid: s.dropout_grid.clone(),
        alpha_grid: s.alpha_grid.clone(),
        batch_size: s.batch_size,
        patience: s.patience,
        max_epochs: s.max_epochs,
        seed: s.seed,
        dump_dir: Some(s.out.clone()),
    };
    cfg.validate().map_err(train_err)?;
    let p = prepare(&data, s.seed, s.max_len, s.batch_size).map_err(dataset_err)?;
    log::info!("split sizes (train, val, test): {:?}", p.split_sizes);
    let shape = ModelShape {
        embed_dim: s.embed_dim.unwrap_or(s.backbone.default_dim()),
        attention_heads: s.attention_heads,
    };
    let build = |dropout| KtModel::build(model_config(&p, s.backbone, s.variant, shape, dropout, s.seed));
    build(s.dropout).map_err(model_err)?;
    create_dir(&s.out)?;

    let mut outputs = Vec::new();
    let (outcome, lr, dropout, alpha) = if s.grid {
        let g = grid_search(build, &p.train, &p.val, &cfg).map_err(train_err)?;
        let best = g.cells[g.best].clone();
        let path = s.out.join("grid.json");
        write_json(&path, &g.cells)?;
        outputs.push(path);
        log::info!("grid: best lr {} dropout {} alpha {} (val auc {:.4})", best.lr, best.dropout, best.alpha, best.val_auc);
        (g.outcome, best.lr, best.dropout, best.alpha)
    } else {
        let model = build(s.dropout).map_err(model_err)?;
        (train(model, &p.train, &p.val, &cfg).map_err(train_err)?, s.lr, s.dropout, s.alpha)
    };
    let test = evaluate(&outcome.model, &p.test).map_err(model_err)?;
    let metrics = RunMetrics {
        variant: s.variant,
        backbone: s.backbone,
        lr,
        dropout,
        alpha,
        val_auc: outcome.best_val.auc,
        val_acc: outcome.best_val.acc,
        test_auc: test.auc,
        test_acc: test.acc,
        epochs_trained: outcome.epochs_trained,
    };
    let metrics_path = s.out.join("metrics.json");
    let history_path = s.out.join("history.csv");
    let checkpoint_path = s.out.join("checkpoint.json");
    write_metrics_json(&metrics_path, &metrics).map_err(train_err)?;
    write_history_csv(&history_path, &outcome.history).map_err(train_err)?;
    let meta = CheckpointMeta {
        seed: s.seed,
        batch_size: s.batch_size,
        alpha,
        lr,
        dropout,
        best_epoch: outcome.best_epoch,
    };
    outcome
        .model
        .save(&checkpoint_path, serde_json::to_value(&meta).expect("serializable"))
        .map_err(model_err)?;
    log::info!(
        "{}/{}: val auc {:.4}, test auc {:.4} acc {:.4} after {} epochs",
        s.backbone,
        s.variant,
        metrics.val_auc,
        metrics.test_auc,
        metrics.test_acc,
        metrics.epochs_trained
    );
    outputs.extend([metrics_path, history_path, checkpoint_path]);
    Ok(RunOutput {
        seed: s.seed,
        inputs: data_inputs(&s.data),
        outputs,
        manifest: s.out.join("manifest.json"),
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Defaults to `eval.json` next to the checkpoint.
    pub out: Option<PathBuf>,
}

pub fn eval_defaults() -> serde_json::Value {
    json!({"checkpoint": null, "data": null, "out": null})
}

fn eval(s: &EvalSettings) -> Result<RunOutput, CliError> {
    require_exists(&s.checkpoint, "checkpoint")?;
    let data = load_data(&s.data)?;
    let (model, meta) = KtModel::load(&s.checkpoint).map_err(|e| CliError::Validation(e.to_string()))?;
    let meta: CheckpointMeta =
        serde_json::from_value(meta).map_err(|e| CliError::Validation(format!("checkpoint metadata: {e}")))?;
    let p = prepare(&data, meta.seed, model.config.max_len, meta.batch_size).map_err(dataset_err)?;
    if (p.vocab.num_questions(), p.vocab.num_concepts()) != (model.config.num_questions, model.config.num_concepts) {
        return Err(CliError::Validation(format!(
            "dataset has {} questions / {} concepts, checkpoint expects {} / {}",
            p.vocab.num_questions(),
            p.vocab.num_concepts(),
            model.config.num_questions,
            model.config.num_concepts
        )));
    }
    let test = evaluate(&model, &p.test).map_err(model_err)?;
    let out = s
        .out
        .clone()
        .unwrap_or_else(|| s.checkpoint.with_file_name("eval.json"));
    let value = json!({
        "variant": model.config.variant,
        "backbone": model.config.backbone,
        "test_auc": test.auc,
        "test_acc": test.acc,
        "n_predictions": test.n_predictions,
        "mp_mse": test.mp_mse,
    });
    write_json(&out, &value)?;
    println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
    Ok(RunOutput {
        seed: meta.seed,
        inputs: [vec![s.checkpoint.clone()], data_inputs(&s.data)].concat(),
        outputs: vec![out.clone()],
        manifest: out.with_extension("manifest.json"),
    })
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSettings {
    pub runs: PathBuf,
    /// Defaults to `<runs>/report.md`.
    pub out: Option<PathBuf>,
}

pub fn report_defaults() -> serde_json::Value {
    json!({"runs": null, "out": null})
}

fn find_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for e in entries {
        if e.is_dir() {
            find_metrics(&e, out)?;
        } else if e.file_name().is_some_and(|n| n == "metrics.json") {
            out.push(e);
        }
    }
    Ok(())
}

#[derive(Default, Clone, Copy)]
struct Cell {
    auc: f64,
    acc: f64,
    runs: usize,
}

/// Markdown table with one row per backbone and AUC/ACC pairs per variant.
/// Cells with several runs show the mean.
pub fn render_report(runs: &[RunMetrics]) -> String {
    let mut cells: BTreeMap<(usize, usize), Cell> = BTreeMap::new();
    for r in runs {
        let b = Backbone::ALL.iter().position(|&x| x == r.backbone).expect("known backbone");
        let v = Variant::ALL.iter().position(|&x| x == r.variant).expect("known variant");
        let c = cells.entry((b, v)).or_default();
        c.auc += r.test_auc;
        c.acc += r.test_acc;
        c.runs += 1;
    }
    let mut s = String::from("| Backbone | original AUC | original ACC | statuskt AUC | statuskt ACC | ΔAUC |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for (bi, backbone) in Backbone::ALL.iter().enumerate() {
        if !cells.keys().any(|&(b, _)| b == bi) {
            continue;
        }
        let mean = |v: usize| cells.get(&(bi, v)).map(|c| (c.auc / c.runs as f64, c.acc / c.runs as f64));
        let fmt = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let (o, k) = (mean(0), mean(1));
        let delta = o.zip(k).map(|(o, k)| k.0 - o.0);
        let _ = writeln!(
            s,
            "| {backbone} | {} | {} | {} | {} | {} |",
            fmt(o.map(|m| m.0)),
            fmt(o.map(|m| m.1)),
            fmt(k.map(|m| m.0)),
            fmt(k.map(|m| m.1)),
            delta.map_or_else(|| "n/a".to_string(), |d| format!("{d:+.4}"))
        );
    }
    let max_runs = cells.values().map(|c| c.runs).max().unwrap_or(0);
    if max_runs > 1 {
        let _ = writeln!(s, "\nTest metrics averaged over up to {max_runs} runs per cell.");
    }
    s
}

fn report(s: &ReportSettings) -> Result<RunOutput, CliError> {
    require_exists(&s.runs, "runs directory")?;
    let mut files = Vec::new();
    find_metrics(&s.runs, &mut files)
        .with_context(|| format!("scanning {}", s.runs.display()))
        .map_err(CliError::Runtime)?;
    if files.is_empty() {
        return Err(CliError::Validation(format!("no metrics.json under {}", s.runs.display())));
    }
    let mut runs = Vec::with_capacity(files.len());
    for f in &files {
        let text = std::fs::read_to_string(f)
            .with_context(|| format!("reading {}", f.display()))
            .map_err(CliError::Runtime)?;
        let m: RunMetrics =
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", f.display())))?;
        runs.push(m);
    }
    let table = render_report(&runs);
    let out = s.out.clone().unwrap_or_else(|| s.runs.join("report.md"));
    std::fs::write(&out, &table)
        .with_context(|| format!("writing {}", out.display()))
        .map_err(CliError::Runtime)?;
    print!("{table}");
    Ok(RunOutput {
        seed: SEED,
        inputs: files,
        outputs: vec![out.clone()],
        manifest: out.with_extension("manifest.json"),
    })
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckSettings {
    pub out: PathBuf,
    pub seed: u64,
}

pub fn gradcheck_defaults() -> serde_json::Value {
    json!({"out": "gradcheck.json", "seed": SEED})
}

#[derive(Serialize)]
struct CheckLine {
    name: String,
    max_rel_error: f64,
    checked: usize,
    worst: Option<String>,
    passed: bool,
}

fn gradcheck(s: &GradcheckSettings) -> Result<RunOutput, CliError> {
    let mut lines = Vec::new();
    for op in OPS {
        let r = check_op(op, s.seed).map_err(CliError::runtime)?;
        lines.push(CheckLine {
            name: format!("op/{op}"),
            passed: r.passed(MAX_REL_ERROR),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            worst: r.worst,
        });
    }
    for backbone in Backbone::ALL {
        for variant in Variant::ALL {
            let r = gradcheck_model(backbone, variant, s.seed).map_err(train_err)?;
            lines.push(CheckLine {
                name: format!("model/{backbone}/{variant}"),
                passed: r.passed(MAX_REL_ERROR),
                max_rel_error: r.max_rel_error,
                checked: r.checked,
                worst: r.worst,
            });
        }
    }
    for l in &lines {
        println!(
            "{} {:<28} max rel err {:.2e} over {} entries",
            if l.passed { "ok  " } else { "FAIL" },
            l.name,
            l.max_rel_error,
            l.checked
        );
    }
    if let Some(dir) = s.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&s.out, &lines)?;
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::runtime(anyhow::anyhow!("gradient check failed: {}", failed.join(", "))));
    }
    Ok(RunOutput {
        seed: s.seed,
        inputs: vec![],
        outputs: vec![s.out.clone()],
        manifest: s.out.with_extension("manifest.json"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(backbone: Backbone, variant: Variant, auc: f64) -> RunMetrics {
        RunMetrics {
            variant,
            backbone,
            lr: 1e-3,
            dropout: 0.1,
            alpha: 0.5,
            val_auc: auc,
            val_acc: 0.6,
            test_auc: auc,
            test_acc: 0.6,
            epochs_trained: 10,
        }
    }

    #[test]
    fn report_pairs_variants_per_backbone() {
        let runs = [
            run(Backbone::Attention, Variant::Statuskt, 0.70),
            run(Backbone::Recurrent, Variant::Original, 0.62),
            run(Backbone::Recurrent, Variant::Statuskt, 0.65),
            run(Backbone::Attention, Variant::Original, 0.66),
        ];
        let table = render_report(&runs);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "| recurrent | 0.6200 | 0.6000 | 0.6500 | 0.6000 | +0.0300 |");
        assert_eq!(lines[3], "| attention | 0.6600 | 0.6000 | 0.7000 | 0.6000 | +0.0400 |");
    }

    #[test]
    fn report_averages_and_marks_gaps() {
        let runs = [
            run(Backbone::Recurrent, Variant::Original, 0.60),
            run(Backbone::Recurrent, Variant::Original, 0.64),
        ];
        let table = render_report(&runs);
        assert!(table.contains("| recurrent | 0.6200 | 0.6000 | n/a | n/a | n/a |"));
        assert!(table.contains("averaged over up to 2 runs"));
    }
}
