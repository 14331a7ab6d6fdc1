use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use photon_vae::detector::DetectorConfig;
use photon_vae::metrics::ConfusionMatrix;
use photon_vae::sampling::{generate_dataset, Dataset, DatasetMeta, DatasetSidecar};
use photon_vae::vae::{Checkpoint, LossBreakdown, NetworkSpec, TrainHistory, Vae};
use photon_vae::workflows::{derive_seed, evaluate, export_latent, mean_observed, run_plan, train_checkpoint, EvalReport, ReportRow};
use photon_vae::Error;

mod config;

use config::{EvalConfig, ExportConfig, FinetuneConfig, GenConfig, SweepConfig, TrainCmdConfig};

const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "photon-vae", version, about = "Photon-source classification with a variational autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed (also read from PHOTON_VAE_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct Grid {
    /// Comma-separated bin sizes.
    #[arg(long, value_delimiter = ',')]
    bin_sizes: Option<Vec<usize>>,
    /// Comma-separated detector efficiencies.
    #[arg(long, value_delimiter = ',')]
    eta: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled dataset (CSV plus JSON sidecar).
    Gen {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: Grid,
    },
    /// Train a model from scratch on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Continue training a checkpoint on another dataset.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to start from.
        #[arg(long)]
        base_checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset or on freshly generated sweeps.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: Grid,
    },
    /// Write per-row latent means of a dataset.
    ExportLatent {
        #[command(flatten)]
        common: Common,
    },
    /// Run a complete training and evaluation workflow.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: Grid,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Lib(e) if e.is_physics() => 2,
            CliError::Lib(Error::Checkpoint(_)) => 3,
            CliError::Lib(Error::DimensionMismatch { .. }) => 4,
            CliError::Lib(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen { common, grid } => cmd_gen(&common, &grid),
        Command::Train { common } => cmd_train(&common),
        Command::Finetune { common, base_checkpoint } => cmd_finetune(&common, base_checkpoint),
        Command::Eval { common, grid } => cmd_eval(&common, &grid),
        Command::ExportLatent { common } => cmd_export_latent(&common),
        Command::Sweep { common, grid } => cmd_sweep(&common, &grid),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("photon-vae: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn prepare_out(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Lib(Error::Io {
        path: dir.to_path_buf(),
        source: e,
    }))
}

fn write_effective<T: Serialize>(dir: &Path, command: &str, cfg: &T) -> CliResult {
    let path = dir.join(format!("{command}.config.json"));
    let mut text = serde_json::to_string_pretty(cfg).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::Lib(Error::Io { path, source: e }))
}

fn summary(value: serde_json::Value) {
    println!("{value}");
}

fn read_dataset(path: &Path) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(CliError::Config(format!("dataset {} does not exist", path.display())));
    }
    Ok(Dataset::read_csv(path)?)
}

fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

fn cmd_gen(common: &Common, grid: &Grid) -> CliResult {
    let mut cfg: GenConfig = config::load(common.config.as_deref())?;
    cfg.dataset.seed = config::resolve_seed(common.seed, cfg.dataset.seed)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(b) = &grid.bin_sizes {
        cfg.bin_sizes = b.clone();
    }
    if let Some(e) = &grid.eta {
        cfg.etas = e.clone();
    }
    cfg.dataset.validate()?;
    prepare_out(&cfg.out)?;
    write_effective(&cfg.out, "gen", &cfg)?;

    let bins = if cfg.bin_sizes.is_empty() { vec![cfg.dataset.bin_size] } else { cfg.bin_sizes.clone() };
    let etas = if cfg.etas.is_empty() { vec![cfg.dataset.detector.efficiency] } else { cfg.etas.clone() };
    let single = bins.len() == 1 && etas.len() == 1;
    let mut files = Vec::new();
    let mut rows = 0;
    for &bin_size in &bins {
        for &eta in &etas {
            let meta = DatasetMeta {
                bin_size,
                detector: DetectorConfig::new(cfg.dataset.detector.n_detectors, eta)?,
                ..cfg.dataset.clone()
            };
            let ds = generate_dataset(&meta)?;
            let stem = if single { "dataset".to_string() } else { format!("dataset_bin{bin_size}_eta{eta}") };
            let csv = cfg.out.join(format!("{stem}.csv"));
            ds.write_csv(&csv)?;
            DatasetSidecar::new(meta, ds.len()).write(&sidecar_path(&csv))?;
            rows += ds.len();
            files.push(csv.display().to_string());
        }
    }
    summary(json!({"command": "gen", "files": files, "rows": rows}));
    Ok(())
}

fn loss_json(l: Option<LossBreakdown>) -> serde_json::Value {
    match l {
        Some(l) => json!({"recon": l.recon, "kl": l.kl, "class": l.class, "total": l.total}),
        None => serde_json::Value::Null,
    }
}

fn history_json(h: &TrainHistory) -> serde_json::Value {
    let best = h.epochs.iter().find(|e| e.epoch == h.best_epoch);
    json!({
        "epochs": h.epochs_run(),
        "best_epoch": h.best_epoch,
        "final_train_loss": loss_json(h.final_train_loss()),
        "best_validation_loss": loss_json(best.and_then(|e| e.validation)),
    })
}

fn cmd_train(common: &Common) -> CliResult {
    let mut cfg: TrainCmdConfig = config::load(common.config.as_deref())?;
    cfg.seed = config::resolve_seed(common.seed, cfg.seed)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.train.seed = derive_seed(cfg.seed, "train", 0);
    let ds = read_dataset(&cfg.dataset)?;
    let spec = match &cfg.network {
        Some(spec) => spec.clone(),
        None => NetworkSpec::new(cfg.features.input_dim(), ds.num_classes().max(2)),
    };
    if spec.input_dim != cfg.features.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            got: cfg.features.input_dim(),
        }
        .into());
    }
    prepare_out(&cfg.out)?;
    write_effective(&cfg.out, "train", &cfg)?;

    let split = ds.split(derive_seed(cfg.seed, "split", 0));
    let init_seed = derive_seed(cfg.seed, "init", 0);
    let mut ck = Checkpoint {
        vae: Vae::new(spec, init_seed)?,
        features: cfg.features,
        init_seed,
        train: None,
        epochs_trained: 0,
    };
    let history = train_checkpoint(&mut ck, &split.train, Some(&split.validation), &cfg.train)?;
    let path = cfg.out.join(CHECKPOINT_FILE);
    ck.save(&path)?;
    let cm = evaluate(&ck, &split.test)?;
    summary(json!({
        "command": "train",
        "checkpoint": path.display().to_string(),
        "training": history_json(&history),
        "test_samples": cm.total(),
        "accuracy": cm.accuracy(),
    }));
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn check_features(ck: &Checkpoint, wanted: Option<photon_vae::vae::InputFeatures>) -> CliResult {
    if let Some(f) = wanted {
        if f.input_dim() != ck.vae.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: ck.vae.spec.input_dim,
                got: f.input_dim(),
            }
            .into());
        }
    }
    Ok(())
}

fn cmd_finetune(common: &Common, base: Option<PathBuf>) -> CliResult {
    let mut cfg: FinetuneConfig = config::load(common.config.as_deref())?;
    cfg.seed = config::resolve_seed(common.seed, cfg.seed)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if base.is_some() {
        cfg.base_checkpoint = base;
    }
    let Some(base_path) = cfg.base_checkpoint.clone() else {
        return Err(CliError::Usage(
            "finetune needs a model to start from: photon-vae finetune --base-checkpoint PATH [--config PATH]".into(),
        ));
    };
    cfg.train.seed = derive_seed(cfg.seed, "finetune", 0);
    let mut ck = load_checkpoint(&base_path)?;
    check_features(&ck, cfg.features)?;
    let ds = read_dataset(&cfg.dataset)?;
    if ds.num_classes() > ck.vae.spec.num_classes {
        return Err(CliError::Lib(Error::InvalidDataset(format!(
            "dataset has {} classes, checkpoint head has {}",
            ds.num_classes(),
            ck.vae.spec.num_classes
        ))));
    }
    prepare_out(&cfg.out)?;
    write_effective(&cfg.out, "finetune", &cfg)?;

    let split = ds.split(derive_seed(cfg.seed, "split", 0));
    let history = train_checkpoint(&mut ck, &split.train, Some(&split.validation), &cfg.train)?;
    let path = cfg.out.join(CHECKPOINT_FILE);
    ck.save(&path)?;
    let cm = evaluate(&ck, &split.test)?;
    summary(json!({
        "command": "finetune",
        "base_checkpoint": base_path.display().to_string(),
        "checkpoint": path.display().to_string(),
        "training": history_json(&history),
        "test_samples": cm.total(),
        "accuracy": cm.accuracy(),
    }));
    Ok(())
}

/// Report row for a whole dataset; coordinates are filled in when every row
/// shares them.
fn dataset_row(ds: &Dataset, cm: &ConfusionMatrix) -> ReportRow {
    fn uniform<T: PartialEq + Copy>(mut it: impl Iterator<Item = T>) -> Option<T> {
        let first = it.next()?;
        it.all(|v| v == first).then_some(first)
    }
    let rows = &ds.rows;
    ReportRow {
        sweep: "dataset".into(),
        bin_size: uniform(rows.iter().map(|r| r.obs.bin_size)).unwrap_or(0),
        eta: uniform(rows.iter().map(|r| r.detector.efficiency)),
        n_detectors: uniform(rows.iter().map(|r| r.detector.n_detectors)),
        nbar_the: uniform(rows.iter().map(|r| r.nbar_the())),
        nbar_obs: (!rows.is_empty()).then(|| rows.iter().map(|r| r.obs.n_bar_obs).sum::<f64>() / rows.len() as f64),
        samples: cm.total(),
        accuracy: cm.accuracy(),
        ..ReportRow::default()
    }
}

fn cmd_eval(common: &Common, grid: &Grid) -> CliResult {
    let mut cfg: EvalConfig = config::load(common.config.as_deref())?;
    cfg.seed = config::resolve_seed(common.seed, cfg.seed)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(b) = &grid.bin_sizes {
        cfg.bin_sizes = b.clone();
    }
    if let Some(e) = &grid.eta {
        cfg.etas = e.clone();
    }
    let ck = load_checkpoint(&cfg.checkpoint)?;
    check_features(&ck, cfg.features)?;
    let sweep = !cfg.bin_sizes.is_empty() || !cfg.etas.is_empty();
    let template = match (&cfg.template, &cfg.dataset) {
        (Some(t), _) => Some(t.clone()),
        (None, Some(csv)) if sweep => Some(DatasetSidecar::read(&sidecar_path(csv))?.meta),
        _ => None,
    };
    if sweep && template.is_none() {
        return Err(CliError::Config("a sweep needs `template` or a `dataset` with its sidecar".into()));
    }
    if !sweep && cfg.dataset.is_none() {
        return Err(CliError::Config("nothing to evaluate: give `dataset`, or sweep with --bin-sizes/--eta".into()));
    }
    prepare_out(&cfg.out)?;
    write_effective(&cfg.out, "eval", &cfg)?;

    let mut report = EvalReport::default();
    if let Some(t) = template.filter(|_| sweep) {
        let bins = if cfg.bin_sizes.is_empty() { vec![t.bin_size] } else { cfg.bin_sizes.clone() };
        let etas = if cfg.etas.is_empty() { vec![t.detector.efficiency] } else { cfg.etas.clone() };
        let mut idx = 0u64;
        for &bin_size in &bins {
            for &eta in &etas {
                let detector = DetectorConfig::new(t.detector.n_detectors, eta)?;
                let meta = DatasetMeta {
                    bin_size,
                    detector,
                    bins_per_class: cfg.bins_per_class,
                    seed: derive_seed(cfg.seed, "eval", idx),
                    ..t.clone()
                };
                idx += 1;
                let ds = generate_dataset(&meta)?;
                let cm = evaluate(&ck, &ds)?;
                let row = ReportRow {
                    sweep: if etas.len() > 1 { "eta" } else { "bin_size" }.into(),
                    bin_size,
                    eta: Some(eta),
                    n_detectors: Some(detector.n_detectors),
                    nbar_the: uniform_mean_param(&meta),
                    nbar_obs: Some(mean_observed(&meta.sources, &detector)?),
                    samples: cm.total(),
                    accuracy: cm.accuracy(),
                    ..ReportRow::default()
                };
                report.push(row, cm);
            }
        }
    } else if let Some(csv) = &cfg.dataset {
        let ds = read_dataset(csv)?;
        let cm = evaluate(&ck, &ds)?;
        report.push(dataset_row(&ds, &cm), cm);
    }
    let (report_path, confusion_path) = report.write(&cfg.out, "report")?;
    let mut total = ConfusionMatrix::new(ck.vae.spec.num_classes);
    for cm in &report.confusion {
        total.merge(cm);
    }
    summary(json!({
        "command": "eval",
        "report": report_path.display().to_string(),
        "confusion": confusion_path.display().to_string(),
        "rows": report.rows.len(),
        "samples": total.total(),
        "accuracy": total.accuracy(),
        "cells": report.rows.iter().map(|r| json!({"bin_size": r.bin_size, "eta": r.eta, "accuracy": r.accuracy})).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn uniform_mean_param(meta: &DatasetMeta) -> Option<f64> {
    let first = meta.sources.first()?.mean_param;
    meta.sources.iter().all(|s| s.mean_param == first).then_some(first)
}

fn cmd_export_latent(common: &Common) -> CliResult {
    let mut cfg: ExportConfig = config::load(common.config.as_deref())?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    let ck = load_checkpoint(&cfg.checkpoint)?;
    let ds = read_dataset(&cfg.dataset)?;
    prepare_out(&cfg.out)?;
    write_effective(&cfg.out, "export-latent", &cfg)?;
    let table = export_latent(&ck, &ds)?;
    let path = cfg.out.join("latent.csv");
    table.write_csv(&path)?;
    summary(json!({
        "command": "export-latent",
        "latent": path.display().to_string(),
        "rows": table.labels.len(),
        "silhouette": table.silhouette(),
    }));
    Ok(())
}

fn cmd_sweep(common: &Common, grid: &Grid) -> CliResult {
    let mut cfg: SweepConfig = config::load(common.config.as_deref())?;
    cfg.seed = config::resolve_seed(common.seed, cfg.seed)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    let mut plan = cfg.build_plan()?;
    if let Some(b) = &grid.bin_sizes {
        plan.eval.bin_sizes = b.clone();
    }
    if let Some(e) = &grid.eta {
        plan.eval.efficiencies = e.clone();
    }
    plan.validate()?;
    prepare_out(&cfg.out)?;
    write_effective(&cfg.out, "sweep", &json!({"config": &cfg, "plan": &plan}))?;

    let output = run_plan(&plan)?;
    let mut checkpoints = Vec::new();
    for (i, stage) in output.stages.iter().enumerate() {
        let path = cfg.out.join(format!("model_stage{i}_bin{}.ckpt", stage.bin_size));
        stage.model.save(&path)?;
        checkpoints.push(path.display().to_string());
    }
    let (report_path, confusion_path) = output.report.write(&cfg.out, "report")?;
    let base = output.base();
    let latent = export_latent(&base.model, &base.test)?;
    let latent_path = cfg.out.join("latent.csv");
    latent.write_csv(&latent_path)?;
    summary(json!({
        "command": "sweep",
        "algorithm": plan.algorithm,
        "checkpoints": checkpoints,
        "report": report_path.display().to_string(),
        "confusion": confusion_path.display().to_string(),
        "latent": latent_path.display().to_string(),
        "training": output.stages.iter().map(|s| history_json(&s.history)).collect::<Vec<_>>(),
        "silhouette": latent.silhouette(),
        "cells": output.report.rows.iter().map(|r| json!({"sweep": r.sweep, "accuracy": r.accuracy})).collect::<Vec<_>>(),
    }));
    Ok(())
}
