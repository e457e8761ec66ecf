mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use impact::checkpoint::{load_trained, save_trained};
use impact::data::{make_openset_split, read_series_csv, synth_generate, OpenSetSplit, SeriesWindow, Setting};
use impact::eval::{decon_metrics, evaluate_split, EvalReport};
use impact::influence::{batch_influence, InfluenceEntry, Partition};
use impact::trainer::{impact_train, point_scores, score_sample, Ablation, TrainAudit, TrainConfig, TrainHistory, TrainedModel};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "impact", version, about = "Influence-guided open-set time-series anomaly detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and its open-set split.
    GenData(RunArgs),
    /// Train on a split (generated from the config when --data is absent).
    Train(TrainArgs),
    /// Score test windows of a split, or every timestep of a CSV series.
    Score(ScoreArgs),
    /// Evaluate a checkpoint on the test set of a split.
    Evaluate(CheckpointArgs),
    /// Influence of every normal-pool sample under a trained model.
    AuditInfluence(CheckpointArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config with a flat `defaults` section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_setting)]
    setting: Option<Setting>,
    #[arg(long)]
    contamination: Option<f64>,
    #[arg(long)]
    clean_validation: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Split produced by gen-data (its directory or split.json).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Disable one component; repeatable.
    #[arg(long = "ablate", value_parser = parse_ablation)]
    ablate: Vec<Ablation>,
    #[arg(long)]
    refresh_per_batch: bool,
    #[arg(long)]
    zscore_combine: bool,
    #[arg(long)]
    signed_dev: bool,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Run directory written by train, or its checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    zscore_combine: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split whose test windows are scored.
    #[arg(long, conflicts_with = "csv", required_unless_present = "csv")]
    data: Option<PathBuf>,
    /// Series CSV (`t,dim_0,...,label`) scored per timestep.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    zscore_combine: bool,
}

fn parse_setting(s: &str) -> std::result::Result<Setting, String> {
    s.parse().map_err(|e: impact::Error| e.to_string())
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: impact::Error| e.to_string())
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
    started_unix: u64,
    finished_unix: u64,
    version: String,
    details: Value,
}

/// Seconds since the epoch, pinned by `SOURCE_DATE_EPOCH` when set.
fn now() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

struct Run {
    command: &'static str,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
    started: u64,
}

impl Run {
    fn start(command: &'static str, config: Option<PathBuf>, seed: Option<u64>, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
        Ok(Self {
            command,
            config,
            seed,
            out: out.to_path_buf(),
            started: now(),
        })
    }

    fn write_json<T: Serialize>(&self, name: &str, v: &T) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("cannot write {}", path.display()))
    }

    /// The manifest goes last and marks the run complete.
    fn finish(self, details: Value) -> Result<()> {
        let m = RunManifest {
            command: self.command.into(),
            config: self.config.clone(),
            seed: self.seed,
            out: self.out.clone(),
            started_unix: self.started,
            finished_unix: now(),
            version: format!("v{}", env!("CARGO_PKG_VERSION")),
            details,
        };
        self.write_json("manifest.json", &m)
    }
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    if let Some(s) = a.setting {
        cfg.split.setting = s;
    }
    if let Some(c) = a.contamination {
        cfg.split.contamination_rate = c;
    }
    if a.clean_validation {
        cfg.split.clean_validation = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split_summary(split: &OpenSetSplit) -> Value {
    json!({
        "setting": split.setting,
        "seen_classes": split.seen_classes,
        "d_n": split.d_n.len(),
        "d_a": split.d_a.len(),
        "validation": split.validation.len(),
        "test": split.test.len(),
        "injected_contaminants": split.injected_ids().len(),
    })
}

fn generate(cfg: &RunConfig) -> Result<(Vec<SeriesWindow>, OpenSetSplit)> {
    let data = synth_generate(&cfg.synth)?;
    let split = make_openset_split(&data, &cfg.split)?;
    Ok((data, split))
}

fn read_split(path: &Path) -> Result<OpenSetSplit> {
    let file = if path.is_dir() { path.join("split.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).with_context(|| format!("cannot read split {}", file.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a split file", file.display()))
}

fn read_checkpoint(path: &Path) -> Result<TrainedModel> {
    let dir = if path.join("checkpoint").is_dir() { path.join("checkpoint") } else { path.to_path_buf() };
    load_trained(&dir).with_context(|| format!("cannot load checkpoint {}", dir.display()))
}

fn cmd_gen_data(a: RunArgs) -> Result<()> {
    let cfg = run_config(&a)?;
    let run = Run::start("gen-data", a.config.clone(), a.seed, &a.out)?;
    let (data, split) = generate(&cfg)?;
    run.write_json("dataset.json", &data)?;
    run.write_json("split.json", &split)?;
    run.write_json("config.json", &cfg)?;
    info!("wrote {} windows to {}", data.len(), a.out.display());
    run.finish(json!({ "windows": data.len(), "split": split_summary(&split) }))
}

#[derive(Serialize)]
struct TrainReport<'a> {
    run_tag: String,
    config: &'a TrainConfig,
    partitions: &'a [InfluenceEntry],
    flipped: &'a [u64],
    reference: &'a [u64],
    perturbed: &'a [u64],
    predicted_flip_delta: f64,
    predicted_perturb_delta: f64,
    stest_residuals: &'a [f64],
    stest_unconverged: usize,
    degenerate_batches: usize,
    history: &'a TrainHistory,
    metrics: EvalReport,
}

fn train_report<'a>(audit: &'a TrainAudit, tm: &'a TrainedModel, metrics: EvalReport) -> TrainReport<'a> {
    TrainReport {
        run_tag: tm.config.run_tag(),
        config: &tm.config,
        partitions: &audit.entries,
        flipped: &audit.flipped,
        reference: &audit.reference,
        perturbed: &audit.perturbed,
        predicted_flip_delta: audit.predicted_flip.delta,
        predicted_perturb_delta: audit.predicted_perturb.delta,
        stest_residuals: &audit.stest_residuals,
        stest_unconverged: audit.stest_unconverged,
        degenerate_batches: audit.degenerate_batches,
        history: &tm.history,
        metrics,
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = run_config(&a.run)?;
    cfg.train.ablations.extend(a.ablate.iter().copied());
    cfg.train.refresh_per_batch |= a.refresh_per_batch;
    cfg.train.zscore_combine |= a.zscore_combine;
    cfg.train.signed_dev |= a.signed_dev;
    cfg.train.validate()?;
    let run = Run::start("train", a.run.config.clone(), a.run.seed, &a.run.out)?;
    let split = match &a.data {
        Some(p) => read_split(p)?,
        None => generate(&cfg)?.1,
    };
    let tm = impact_train(&split, &cfg.train)?;
    save_trained(&a.run.out.join("checkpoint"), &tm)?;
    let metrics = evaluate_split(&tm, &split)?;
    run.write_json("report.json", &train_report(&tm.audit, &tm, metrics.clone()))?;
    info!("{}: test AUC {:.4}", tm.config.run_tag(), metrics.auc_overall);
    run.finish(json!({ "run_tag": tm.config.run_tag(), "split": split_summary(&split), "auc_overall": metrics.auc_overall }))
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let mut tm = read_checkpoint(&a.checkpoint)?;
    tm.config.zscore_combine |= a.zscore_combine;
    let run = Run::start("score", None, Some(tm.config.seed), &a.out)?;
    if let Some(csv) = &a.csv {
        let series = read_series_csv(csv, tm.model.arch.dims)?;
        let scores = point_scores(&tm, &series)?;
        run.write_json("scores.json", &json!({ "source": csv, "point_scores": scores }))?;
        return run.finish(json!({ "timesteps": scores.len() }));
    }
    let split = read_split(a.data.as_deref().expect("clap requires --data or --csv"))?;
    let rows: Vec<Value> = split
        .test
        .iter()
        .map(|z| {
            let p = score_sample(&tm, z)?;
            Ok(json!({ "id": z.id, "label": z.label, "s_m": p.s_m, "s_f": p.s_f, "s": p.s }))
        })
        .collect::<Result<_>>()?;
    run.write_json("scores.json", &rows)?;
    run.finish(json!({ "windows": rows.len() }))
}

fn cmd_evaluate(a: CheckpointArgs) -> Result<()> {
    let mut tm = read_checkpoint(&a.checkpoint)?;
    tm.config.zscore_combine |= a.zscore_combine;
    let split = read_split(&a.data)?;
    let run = Run::start("evaluate", None, Some(tm.config.seed), &a.out)?;
    let report = evaluate_split(&tm, &split)?;
    run.write_json("eval.json", &report)?;
    fs::write(a.out.join("metrics.csv"), format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()))?;
    run.finish(json!({ "run_tag": report.run_tag, "auc_overall": report.auc_overall }))
}

const TOP_HARMFUL: usize = 20;

fn cmd_audit(a: CheckpointArgs) -> Result<()> {
    let tm = read_checkpoint(&a.checkpoint)?;
    let split = read_split(&a.data)?;
    let run = Run::start("audit-influence", None, Some(tm.config.seed), &a.out)?;
    let report = batch_influence(
        &tm.model,
        &split.d_n,
        &split.d_a,
        &split.validation,
        &tm.loss_config(),
        &tm.config.influence(),
        tm.config.k,
    )?;
    run.write_json("audit.json", &report.entries)?;

    let mut harmful: Vec<&InfluenceEntry> = report.entries.iter().filter(|e| e.partition != Partition::LabeledAnomaly).collect();
    harmful.sort_by(|x, y| y.influence.partial_cmp(&x.influence).unwrap().then(x.id.cmp(&y.id)));
    harmful.truncate(TOP_HARMFUL);
    let flipped = report.ids(Partition::Contaminated).into_iter().collect();
    let decon = decon_metrics(&flipped, &split.injected_ids());
    run.write_json(
        "audit_summary.json",
        &json!({
            "top_harmful": harmful,
            "decon": decon,
            "stest_residual": report.stest_residual,
            "stest_converged": report.stest_converged,
            "damping": report.damping,
            "validation_size": report.validation_size,
        }),
    )?;
    run.finish(json!({ "entries": report.entries.len(), "contaminated": decon.flipped }))
}

/// 1 for user errors, 2 for numerical failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| c.downcast_ref::<impact::Error>().is_some_and(impact::Error::is_numerical));
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Score(a) => cmd_score(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::AuditInfluence(a) => cmd_audit(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
