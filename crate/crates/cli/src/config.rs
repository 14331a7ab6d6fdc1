//! JSON run configurations. Every field has a default so a config file only
//! needs the values it changes; command-line flags are applied on top.

use std::path::{Path, PathBuf};

use photon_vae::detector::DetectorConfig;
use photon_vae::distributions::SourceSpec;
use photon_vae::sampling::DatasetMeta;
use photon_vae::vae::{InputFeatures, NetworkSpec, TrainConfig};
use photon_vae::workflows::{Algorithm, TrainPlan};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "PHOTON_VAE_SEED";

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

/// Seed precedence: flag, then environment, then config file.
pub fn resolve_seed(flag: Option<u64>, file: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(file),
    }
}

fn default_meta() -> DatasetMeta {
    DatasetMeta {
        sources: vec![SourceSpec::spacs(1.3), SourceSpec::spats(1.3)],
        detector: DetectorConfig::lossless(),
        bin_size: 100,
        bins_per_class: 2000,
        seed: 0,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub dataset: DatasetMeta,
    /// Generate one dataset per listed bin size instead of `dataset.bin_size`.
    pub bin_sizes: Vec<usize>,
    /// Generate one dataset per listed efficiency.
    pub etas: Vec<f64>,
    pub out: PathBuf,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            dataset: default_meta(),
            bin_sizes: Vec::new(),
            etas: Vec::new(),
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub dataset: PathBuf,
    pub features: InputFeatures,
    /// Full network layout; defaults to the standard layout for the
    /// features and the dataset's class count.
    pub network: Option<NetworkSpec>,
    pub train: TrainConfig,
    /// Seeds the split, the initialization and training noise.
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("out/dataset.csv"),
            features: InputFeatures::Probabilities,
            network: None,
            train: TrainConfig::default(),
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub dataset: PathBuf,
    pub base_checkpoint: Option<PathBuf>,
    /// When given, must match the base checkpoint's features.
    pub features: Option<InputFeatures>,
    pub train: TrainConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("out/dataset.csv"),
            base_checkpoint: None,
            features: None,
            train: TrainConfig {
                epochs: 50,
                ..TrainConfig::default()
            },
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    /// Dataset to evaluate; its sidecar is the template for sweeps.
    pub dataset: Option<PathBuf>,
    /// Generation template for sweeps when no dataset is given.
    pub template: Option<DatasetMeta>,
    pub features: Option<InputFeatures>,
    pub bin_sizes: Vec<usize>,
    pub etas: Vec<f64>,
    /// Bins per class generated for each sweep cell.
    pub bins_per_class: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("out/model.ckpt"),
            dataset: None,
            template: None,
            features: None,
            bin_sizes: Vec::new(),
            etas: Vec::new(),
            bins_per_class: 500,
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("out/model.ckpt"),
            dataset: PathBuf::from("out/dataset.csv"),
            out: PathBuf::from("out"),
        }
    }
}

/// A whole workflow, either from a preset or as an explicit plan.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub algorithm: Algorithm,
    /// Source mean parameter (`n̄_the` for the lossy preset).
    pub nbar: Option<f64>,
    pub bins_per_class: Option<usize>,
    /// Training efficiencies of the lossy preset.
    pub etas: Vec<f64>,
    /// Observed-mean targets whose pairs join the lossy training grid.
    pub nbar_obs_targets: Vec<f64>,
    /// Mix ratios of the mixed-grid preset.
    pub ratios: Vec<f64>,
    /// Overrides every stage's epoch budget.
    pub epochs: Option<usize>,
    /// Replaces the preset entirely.
    pub plan: Option<TrainPlan>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Lossless,
            nbar: None,
            bins_per_class: None,
            etas: vec![0.9, 0.8, 0.6],
            nbar_obs_targets: vec![1.3, 1.6, 2.0, 2.4],
            ratios: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            epochs: None,
            plan: None,
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

impl SweepConfig {
    pub fn build_plan(&self) -> photon_vae::Result<TrainPlan> {
        let mut plan = match &self.plan {
            Some(p) => p.clone(),
            None => match self.algorithm {
                Algorithm::Lossless => {
                    TrainPlan::algorithm1(self.nbar.unwrap_or(1.3), self.bins_per_class.unwrap_or(2000), self.seed)
                }
                Algorithm::LossyWithNbar => TrainPlan::algorithm2(
                    self.nbar.unwrap_or(1.9),
                    &self.etas,
                    &self.nbar_obs_targets,
                    self.bins_per_class.unwrap_or(1000),
                    self.seed,
                )?,
                Algorithm::MixedGrid => {
                    TrainPlan::mixed_grid(self.nbar.unwrap_or(1.3), &self.ratios, self.bins_per_class.unwrap_or(2000), self.seed)
                }
            },
        };
        if let Some(e) = self.epochs {
            for s in &mut plan.stages {
                s.epochs = e;
            }
        }
        Ok(plan)
    }
}
