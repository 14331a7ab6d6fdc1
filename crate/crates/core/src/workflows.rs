//! Training plans and the three experiment workflows: lossless training
//! with bin-size transfer, lossy training with the observed mean as an
//! extra input, and the four-class mixed-state grid.
//!
//! Every dataset and evaluation cell draws from its own seed derived from
//! the plan seed, so reports are reproducible bit for bit. Evaluation cells
//! run in parallel; results are collected in grid order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{observed_mean, DetectorConfig};
use crate::distributions::{SourceKind, SourceSpec};
use crate::error::{Error, Result};
use crate::format::sig9;
use crate::metrics::{silhouette, ConfusionMatrix};
use crate::sampling::{generate_dataset, splitmix64, Dataset, DatasetMeta, Split};
use crate::vae::{fit, Checkpoint, InputFeatures, Matrix, NetworkSpec, TrainConfig, TrainHistory, TrainingData, Vae};

/// Mixed-grid class order.
pub const MIXED_CLASSES: [&str; 4] = ["mix_spacs", "mix_spats", "coherent", "thermal"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// SPACS vs SPATS on lossless data, probabilities only.
    Lossless,
    /// SPACS vs SPATS over lossy detectors, probabilities plus observed mean.
    LossyWithNbar,
    /// Four classes: mixed SPACS, mixed SPATS, coherent, thermal.
    MixedGrid,
}

impl Algorithm {
    pub fn features(self) -> InputFeatures {
        match self {
            Algorithm::LossyWithNbar => InputFeatures::ProbabilitiesAndMean,
            Algorithm::Lossless | Algorithm::MixedGrid => InputFeatures::Probabilities,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Algorithm::MixedGrid => 4,
            _ => 2,
        }
    }
}

/// One training pass over the union of several generated datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub datasets: Vec<DatasetMeta>,
    pub epochs: usize,
    /// Start from an existing model rather than a fresh one.
    pub fine_tune: bool,
}

impl Stage {
    pub fn bin_size(&self) -> usize {
        self.datasets.first().map_or(0, |d| d.bin_size)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub bin_sizes: Vec<usize>,
    pub efficiencies: Vec<f64>,
    pub nbar_obs: Vec<f64>,
    /// `(r1, r2)`: mixed-SPATS and mixed-SPACS ratios.
    pub mix_ratios: Vec<(f64, f64)>,
    /// Fresh bins per class drawn for every evaluation cell.
    pub bins_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub algorithm: Algorithm,
    pub stages: Vec<Stage>,
    /// Model to continue from; required when the first stage fine-tunes.
    #[serde(default)]
    pub base_checkpoint: Option<PathBuf>,
    pub eval: EvalGrid,
    /// Optimizer, batching and early stopping; stage epochs override `epochs`.
    pub train: TrainConfig,
    /// Source mean parameter of the evaluation sweeps.
    pub nbar_the: f64,
    /// Detector count of lossy evaluation cells.
    pub n_detectors: usize,
    pub seed: u64,
}

/// Seed for an independent stream named `tag`, item `index`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let h = tag
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01B3));
    splitmix64(seed ^ splitmix64(h ^ splitmix64(index)))
}

fn binary_sources(mean_param: f64) -> Vec<SourceSpec> {
    vec![SourceSpec::spacs(mean_param), SourceSpec::spats(mean_param)]
}

fn mixed_sources(mean_param: f64, r1: f64, r2: f64) -> Vec<SourceSpec> {
    vec![
        SourceSpec::mixed_coherent_spacs(mean_param, r2),
        SourceSpec::mixed_thermal_spats(mean_param, r1),
        SourceSpec::coherent(mean_param),
        SourceSpec::thermal(mean_param),
    ]
}

/// Mean parameter at which the class-averaged observed mean of `kinds`
/// behind `detector` equals `target`, by bisection.
pub fn invert_observed_mean(kinds: &[SourceKind], detector: &DetectorConfig, target: f64) -> Result<f64> {
    let avg = |m: f64| -> Result<f64> {
        let mut s = 0.0;
        for &kind in kinds {
            s += observed_mean(&SourceSpec::new(kind, m), detector)?;
        }
        Ok(s / kinds.len() as f64)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    if target < avg(0.0)? {
        return Err(Error::InvalidPlan(format!("observed mean {target} is below the reachable range")));
    }
    while avg(hi)? < target {
        hi *= 2.0;
        if hi > 256.0 {
            return Err(Error::InvalidPlan(format!(
                "observed mean {target} is not reachable with {} detectors at efficiency {}",
                detector.n_detectors, detector.efficiency
            )));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if avg(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Efficiency at which the class-averaged observed mean of `sources` behind
/// `n_detectors` equals `target`, or `None` when no efficiency in `(0, 1]`
/// reaches it.
pub fn invert_efficiency(sources: &[SourceSpec], n_detectors: usize, target: f64) -> Result<Option<f64>> {
    let avg = |eta: f64| -> Result<f64> { mean_observed(sources, &DetectorConfig::new(n_detectors, eta)?) };
    if target <= 0.0 || target > avg(1.0)? {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if avg(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// Class-averaged analytic observed mean of a cell.
pub fn mean_observed(sources: &[SourceSpec], detector: &DetectorConfig) -> Result<f64> {
    let mut s = 0.0;
    for src in sources {
        s += observed_mean(src, detector)?;
    }
    Ok(s / sources.len() as f64)
}

impl TrainPlan {
    /// SPACS vs SPATS at mean parameter `nbar`, lossless detector: base
    /// training at bin 100, fine-tuning at bin 50, evaluation at
    /// 50, 100, 200 and 500.
    pub fn algorithm1(nbar: f64, bins_per_class: usize, seed: u64) -> Self {
        let meta = |bin_size: usize, i: u64| DatasetMeta {
            sources: binary_sources(nbar),
            detector: DetectorConfig::lossless(),
            bin_size,
            bins_per_class,
            seed: derive_seed(seed, "stage", i),
        };
        Self {
            algorithm: Algorithm::Lossless,
            stages: vec![
                Stage {
                    datasets: vec![meta(100, 0)],
                    epochs: 200,
                    fine_tune: false,
                },
                Stage {
                    datasets: vec![meta(50, 1)],
                    epochs: 50,
                    fine_tune: true,
                },
            ],
            base_checkpoint: None,
            eval: EvalGrid {
                bin_sizes: vec![50, 100, 200, 500],
                bins_per_class: 500,
                ..EvalGrid::default()
            },
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            nbar_the: nbar,
            n_detectors: DetectorConfig::lossless().n_detectors,
            seed,
        }
    }

    /// One lossy model over `(n̄_the, η)` pairs with four detectors at bin
    /// 200: `nbar_the` at every training efficiency, plus the pairs that
    /// put the class-averaged observed mean on each of `nbar_obs_targets`.
    pub fn algorithm2(nbar_the: f64, etas: &[f64], nbar_obs_targets: &[f64], bins_per_class: usize, seed: u64) -> Result<Self> {
        let n_detectors = 4;
        let kinds = [SourceKind::Spacs, SourceKind::Spats];
        let mut pairs = Vec::new();
        for &eta in etas {
            pairs.push((nbar_the, eta));
        }
        for &target in nbar_obs_targets {
            for &eta in etas {
                let det = DetectorConfig::new(n_detectors, eta)?;
                pairs.push((invert_observed_mean(&kinds, &det, target)?, eta));
            }
        }
        let datasets = pairs
            .iter()
            .enumerate()
            .map(|(i, &(m, eta))| {
                Ok(DatasetMeta {
                    sources: binary_sources(m),
                    detector: DetectorConfig::new(n_detectors, eta)?,
                    bin_size: 200,
                    bins_per_class,
                    seed: derive_seed(seed, "pair", i as u64),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            algorithm: Algorithm::LossyWithNbar,
            stages: vec![Stage {
                datasets,
                epochs: 200,
                fine_tune: false,
            }],
            base_checkpoint: None,
            eval: EvalGrid {
                bin_sizes: vec![50, 100, 200, 500],
                efficiencies: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
                nbar_obs: vec![0.5, 0.8, 1.0, 1.3, 1.6, 2.0, 2.4, 2.8],
                bins_per_class: 500,
                ..EvalGrid::default()
            },
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            nbar_the,
            n_detectors,
            seed,
        })
    }

    /// Shared four-class model over mix ratios `ratios` (values of 1 are
    /// evaluated but never trained on), lossless detector, bin 200.
    pub fn mixed_grid(mean_param: f64, ratios: &[f64], bins_per_class: usize, seed: u64) -> Self {
        let train_ratios: Vec<f64> = ratios.iter().copied().filter(|&r| r < 1.0).collect();
        let per_ratio = bins_per_class.div_ceil(train_ratios.len().max(1));
        let datasets = train_ratios
            .iter()
            .enumerate()
            .map(|(i, &r)| DatasetMeta {
                sources: mixed_sources(mean_param, r, r),
                detector: DetectorConfig::lossless(),
                bin_size: 200,
                bins_per_class: per_ratio,
                seed: derive_seed(seed, "ratio", i as u64),
            })
            .collect();
        let mut cells = Vec::new();
        for &r2 in ratios {
            for &r1 in ratios {
                cells.push((r1, r2));
            }
        }
        Self {
            algorithm: Algorithm::MixedGrid,
            stages: vec![Stage {
                datasets,
                epochs: 200,
                fine_tune: false,
            }],
            base_checkpoint: None,
            eval: EvalGrid {
                mix_ratios: cells,
                bins_per_class: 250,
                ..EvalGrid::default()
            },
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            nbar_the: mean_param,
            n_detectors: DetectorConfig::lossless().n_detectors,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPlan(m));
        let Some(first) = self.stages.first() else {
            return bad("plan has no stages".into());
        };
        if first.fine_tune && self.base_checkpoint.is_none() {
            return bad("the first stage fine-tunes but no base checkpoint is given".into());
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.datasets.is_empty() {
                return bad(format!("stage {i} has no datasets"));
            }
            for meta in &stage.datasets {
                meta.validate()?;
                if meta.bin_size != stage.bin_size() {
                    return bad(format!("stage {i} mixes bin sizes"));
                }
                if meta.sources.len() != self.algorithm.num_classes() {
                    return bad(format!(
                        "stage {i}: {} sources for a {}-class task",
                        meta.sources.len(),
                        self.algorithm.num_classes()
                    ));
                }
            }
            if i > 0 && !stage.fine_tune {
                return bad(format!("stage {i} must fine-tune the base model"));
            }
        }
        if self.eval.bins_per_class == 0 {
            return bad("evaluation needs at least one bin per class".into());
        }
        Ok(())
    }

    fn stage_split(&self, stage_idx: usize) -> Result<Split> {
        let stage = &self.stages[stage_idx];
        let mut split = Split {
            train: Dataset::default(),
            validation: Dataset::default(),
            test: Dataset::default(),
        };
        for (j, meta) in stage.datasets.iter().enumerate() {
            let part = generate_dataset(meta)?.split(derive_seed(self.seed, "split", (stage_idx * 1000 + j) as u64));
            split.train.extend(part.train);
            split.validation.extend(part.validation);
            split.test.extend(part.test);
        }
        Ok(split)
    }

    fn base_model(&self) -> Result<Checkpoint> {
        let features = self.algorithm.features();
        if let Some(path) = &self.base_checkpoint {
            let ck = Checkpoint::load(path)?;
            check_compatible(&ck, features, self.algorithm.num_classes())?;
            return Ok(ck);
        }
        let spec = NetworkSpec::new(features.input_dim(), self.algorithm.num_classes());
        let init_seed = derive_seed(self.seed, "init", 0);
        Ok(Checkpoint {
            vae: Vae::new(spec, init_seed)?,
            features,
            init_seed,
            train: None,
            epochs_trained: 0,
        })
    }

    fn run_stage(&self, stage_idx: usize, mut model: Checkpoint) -> Result<StageOutcome> {
        let stage = &self.stages[stage_idx];
        let split = self.stage_split(stage_idx)?;
        let cfg = TrainConfig {
            epochs: stage.epochs,
            seed: derive_seed(self.train.seed, "train", stage_idx as u64),
            ..self.train.clone()
        };
        let history = train_checkpoint(&mut model, &split.train, Some(&split.validation), &cfg)?;
        Ok(StageOutcome {
            bin_size: stage.bin_size(),
            model,
            history,
            test: split.test,
        })
    }
}

fn check_compatible(ck: &Checkpoint, features: InputFeatures, num_classes: usize) -> Result<()> {
    if ck.vae.spec.input_dim != features.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: features.input_dim(),
            got: ck.vae.spec.input_dim,
        });
    }
    if ck.vae.spec.num_classes != num_classes {
        return Err(Error::InvalidPlan(format!(
            "model head has {} classes, task has {num_classes}",
            ck.vae.spec.num_classes
        )));
    }
    Ok(())
}

/// Trains `ck` in place on `train` (early stopping on `validation`) and
/// records the run in its header fields.
pub fn train_checkpoint(ck: &mut Checkpoint, train: &Dataset, validation: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainHistory> {
    let tr = TrainingData::from_dataset(train, ck.features);
    let va = validation.map(|v| TrainingData::from_dataset(v, ck.features));
    let history = fit(&mut ck.vae, &tr, va.as_ref(), cfg)?;
    ck.train = Some(cfg.clone());
    ck.epochs_trained += history.epochs_run();
    Ok(history)
}

/// Confusion matrix of `ck` on every row of `ds`.
pub fn evaluate(ck: &Checkpoint, ds: &Dataset) -> Result<ConfusionMatrix> {
    let data = TrainingData::from_dataset(ds, ck.features);
    let num_classes = ck.vae.spec.num_classes;
    if ds.num_classes() > num_classes {
        return Err(Error::InvalidPlan(format!(
            "dataset has {} classes, model head has {num_classes}",
            ds.num_classes()
        )));
    }
    if ds.is_empty() {
        return Ok(ConfusionMatrix::new(num_classes));
    }
    let predicted = ck.vae.predict(&data.x)?;
    ConfusionMatrix::from_predictions(num_classes, &ds.labels(), &predicted)
}

/// Per-row latent means of `ds` under `ck`, with labels.
pub fn export_latent(ck: &Checkpoint, ds: &Dataset) -> Result<LatentTable> {
    let data = TrainingData::from_dataset(ds, ck.features);
    let z = if ds.is_empty() {
        Matrix::zeros(0, ck.vae.spec.latent_dim)
    } else {
        ck.vae.latent_means(&data.x)?
    };
    Ok(LatentTable { z, labels: ds.labels() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub z: Matrix,
    pub labels: Vec<usize>,
}

impl LatentTable {
    pub fn silhouette(&self) -> f64 {
        silhouette(&self.z, &self.labels)
    }

    /// `z1,...,zk,label`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (1..=self.z.cols()).map(|i| format!("z{i}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",label\n");
        for (i, label) in self.labels.iter().enumerate() {
            for v in self.z.row(i) {
                out.push_str(&sig9(*v));
                out.push(',');
            }
            let _ = writeln!(out, "{label}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One evaluated grid cell. Coordinates that do not apply stay empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Which sweep the cell belongs to, e.g. `bin_size` or `eta`.
    pub sweep: String,
    pub bin_size: usize,
    pub eta: Option<f64>,
    pub n_detectors: Option<usize>,
    pub nbar_the: Option<f64>,
    pub nbar_obs: Option<f64>,
    pub r1: Option<f64>,
    pub r2: Option<f64>,
    pub samples: u64,
    pub accuracy: f64,
}

pub const REPORT_HEADER: &str = "cell,sweep,bin_size,eta,n_detectors,nbar_the,nbar_obs,r1,r2,samples,accuracy";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// One matrix per row, same order.
    pub confusion: Vec<ConfusionMatrix>,
}

impl EvalReport {
    pub fn push(&mut self, row: ReportRow, cm: ConfusionMatrix) {
        self.rows.push(row);
        self.confusion.push(cm);
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.confusion.extend(other.confusion);
    }

    pub fn sweep<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.sweep == name)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(sig9).unwrap_or_default();
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{},{},{},{},{},{}",
                r.sweep,
                r.bin_size,
                opt(r.eta),
                r.n_detectors.map(|n| n.to_string()).unwrap_or_default(),
                opt(r.nbar_the),
                opt(r.nbar_obs),
                opt(r.r1),
                opt(r.r2),
                r.samples,
                sig9(r.accuracy)
            );
        }
        out
    }

    /// `cell,true,predicted,count`, where `cell` indexes the report rows.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("cell,true,predicted,count\n");
        for (i, cm) in self.confusion.iter().enumerate() {
            for (t, row) in cm.counts.iter().enumerate() {
                for (p, c) in row.iter().enumerate() {
                    let _ = writeln!(out, "{i},{t},{p},{c}");
                }
            }
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>_confusion.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let report = dir.join(format!("{stem}.csv"));
        let confusion = dir.join(format!("{stem}_confusion.csv"));
        std::fs::write(&report, self.to_csv()).map_err(|e| Error::io(&report, e))?;
        std::fs::write(&confusion, self.confusion_csv()).map_err(|e| Error::io(&confusion, e))?;
        Ok((report, confusion))
    }
}

/// A trained model and what it was trained on.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub bin_size: usize,
    pub model: Checkpoint,
    pub history: TrainHistory,
    /// Held-out rows of the stage's own data.
    pub test: Dataset,
}

#[derive(Clone, Debug)]
pub struct WorkflowOutput {
    /// Base model first, then one per fine-tuning stage.
    pub stages: Vec<StageOutcome>,
    pub report: EvalReport,
}

impl WorkflowOutput {
    pub fn base(&self) -> &StageOutcome {
        &self.stages[0]
    }
}

/// A cell to evaluate: generation recipe plus the row to report.
struct Cell {
    meta: DatasetMeta,
    row: ReportRow,
    model: usize,
}

fn run_cells(models: &[&Checkpoint], cells: Vec<Cell>) -> Result<EvalReport> {
    let results: Vec<(ReportRow, ConfusionMatrix)> = cells
        .into_par_iter()
        .map(|cell| {
            let ds = generate_dataset(&cell.meta)?;
            let cm = evaluate(models[cell.model], &ds)?;
            let mut row = cell.row;
            row.samples = cm.total();
            row.accuracy = cm.accuracy();
            Ok((row, cm))
        })
        .collect::<Result<_>>()?;
    let mut report = EvalReport::default();
    for (row, cm) in results {
        report.push(row, cm);
    }
    Ok(report)
}

fn expect_algorithm(plan: &TrainPlan, algorithm: Algorithm) -> Result<()> {
    plan.validate()?;
    if plan.algorithm != algorithm {
        return Err(Error::InvalidPlan(format!(
            "plan is for {:?}, not {algorithm:?}",
            plan.algorithm
        )));
    }
    Ok(())
}

/// Dispatches on the plan's algorithm.
pub fn run_plan(plan: &TrainPlan) -> Result<WorkflowOutput> {
    match plan.algorithm {
        Algorithm::Lossless => run_algorithm1(plan),
        Algorithm::LossyWithNbar => run_algorithm2(plan),
        Algorithm::MixedGrid => run_mixed_grid(plan),
    }
}

/// Trains the base model on the first stage, fine-tunes a copy of it on
/// every later stage, and evaluates each grid bin size with the model of
/// that bin size (the base model when none was fine-tuned for it).
pub fn run_algorithm1(plan: &TrainPlan) -> Result<WorkflowOutput> {
    expect_algorithm(plan, Algorithm::Lossless)?;
    let base = plan.run_stage(0, plan.base_model()?)?;
    let mut stages = vec![base];
    for i in 1..plan.stages.len() {
        let tuned = plan.run_stage(i, stages[0].model.clone())?;
        stages.push(tuned);
    }

    let template = &plan.stages[0].datasets[0];
    let models: Vec<&Checkpoint> = stages.iter().map(|s| &s.model).collect();
    let cells = plan
        .eval
        .bin_sizes
        .iter()
        .enumerate()
        .map(|(i, &bin)| {
            let model = stages.iter().rposition(|s| s.bin_size == bin).unwrap_or(0);
            let meta = DatasetMeta {
                bin_size: bin,
                bins_per_class: plan.eval.bins_per_class,
                seed: derive_seed(plan.seed, "eval-bin", i as u64),
                ..template.clone()
            };
            let row = ReportRow {
                sweep: "bin_size".into(),
                bin_size: bin,
                eta: Some(meta.detector.efficiency),
                n_detectors: Some(meta.detector.n_detectors),
                nbar_the: Some(meta.sources[0].mean_param),
                nbar_obs: Some(mean_observed(&meta.sources, &meta.detector)?),
                ..ReportRow::default()
            };
            Ok(Cell { meta, row, model })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = run_cells(&models, cells)?;
    Ok(WorkflowOutput { stages, report })
}

/// Trains one model over the whole pair grid, then sweeps efficiency at
/// the plan's `nbar_the`, observed mean at that `nbar_the` (the efficiency
/// is solved for), and bin size at each training efficiency.
pub fn run_algorithm2(plan: &TrainPlan) -> Result<WorkflowOutput> {
    expect_algorithm(plan, Algorithm::LossyWithNbar)?;
    let mut stages = vec![plan.run_stage(0, plan.base_model()?)?];
    for i in 1..plan.stages.len() {
        let prev = stages[i - 1].model.clone();
        stages.push(plan.run_stage(i, prev)?);
    }
    let model = stages.last().expect("nonempty").model.clone();
    let bin = plan.stages[0].bin_size();
    let mut train_etas: Vec<f64> = Vec::new();
    for meta in &plan.stages[0].datasets {
        if !train_etas.contains(&meta.detector.efficiency) {
            train_etas.push(meta.detector.efficiency);
        }
    }

    let nd = plan.n_detectors;
    let mut cells = Vec::new();
    let cell = |sweep: &str, idx: usize, m: f64, eta: f64, bin_size: usize| -> Result<Cell> {
        let detector = DetectorConfig::new(nd, eta)?;
        let meta = DatasetMeta {
            sources: binary_sources(m),
            detector,
            bin_size,
            bins_per_class: plan.eval.bins_per_class,
            seed: derive_seed(plan.seed, sweep, idx as u64),
        };
        let row = ReportRow {
            sweep: sweep.into(),
            bin_size,
            eta: Some(eta),
            n_detectors: Some(nd),
            nbar_the: Some(m),
            nbar_obs: Some(mean_observed(&meta.sources, &detector)?),
            ..ReportRow::default()
        };
        Ok(Cell { meta, row, model: 0 })
    };
    for (i, &eta) in plan.eval.efficiencies.iter().enumerate() {
        cells.push(cell("eta", i, plan.nbar_the, eta, bin)?);
    }
    let sources = binary_sources(plan.nbar_the);
    for (k, &target) in plan.eval.nbar_obs.iter().enumerate() {
        // targets beyond the η = 1 observed mean are out of reach
        if let Some(eta) = invert_efficiency(&sources, nd, target)? {
            cells.push(cell("nbar_obs", k, plan.nbar_the, eta, bin)?);
        }
    }
    let mut k = 0;
    for &b in &plan.eval.bin_sizes {
        for &eta in &train_etas {
            cells.push(cell("bin_size", k, plan.nbar_the, eta, b)?);
            k += 1;
        }
    }
    let report = run_cells(&[&model], cells)?;
    Ok(WorkflowOutput { stages, report })
}

/// Trains the shared four-class model and evaluates every `(r1, r2)` cell
/// on fresh data.
pub fn run_mixed_grid(plan: &TrainPlan) -> Result<WorkflowOutput> {
    expect_algorithm(plan, Algorithm::MixedGrid)?;
    let mut stages = vec![plan.run_stage(0, plan.base_model()?)?];
    for i in 1..plan.stages.len() {
        let prev = stages[i - 1].model.clone();
        stages.push(plan.run_stage(i, prev)?);
    }
    let model = stages.last().expect("nonempty").model.clone();
    let template = &plan.stages[0].datasets[0];
    let cells = plan
        .eval
        .mix_ratios
        .iter()
        .enumerate()
        .map(|(i, &(r1, r2))| {
            let meta = DatasetMeta {
                sources: mixed_sources(plan.nbar_the, r1, r2),
                bins_per_class: plan.eval.bins_per_class,
                seed: derive_seed(plan.seed, "cell", i as u64),
                ..template.clone()
            };
            let row = ReportRow {
                sweep: "mix_ratio".into(),
                bin_size: meta.bin_size,
                eta: Some(meta.detector.efficiency),
                n_detectors: Some(meta.detector.n_detectors),
                nbar_the: Some(plan.nbar_the),
                nbar_obs: Some(mean_observed(&meta.sources, &meta.detector)?),
                r1: Some(r1),
                r2: Some(r2),
                ..ReportRow::default()
            };
            Ok(Cell { meta, row, model: 0 })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = run_cells(&[&model], cells)?;
    Ok(WorkflowOutput { stages, report })
}
