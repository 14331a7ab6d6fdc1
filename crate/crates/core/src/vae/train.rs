use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{LossBreakdown, LossWeights};
use super::matrix::Matrix;
use super::model::{TrainNoise, Vae};
use super::optim::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::sampling::{BinnedObservation, Dataset};
use crate::sampling::shuffle;

/// Which bin statistics feed the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFeatures {
    /// `P(0..=4)`.
    Probabilities,
    /// `P(0..=4)` followed by the bin's mean click count, unscaled.
    ProbabilitiesAndMean,
}

impl InputFeatures {
    pub fn input_dim(self) -> usize {
        match self {
            InputFeatures::Probabilities => 5,
            InputFeatures::ProbabilitiesAndMean => 6,
        }
    }

    pub fn from_input_dim(dim: usize) -> Option<Self> {
        match dim {
            5 => Some(InputFeatures::Probabilities),
            6 => Some(InputFeatures::ProbabilitiesAndMean),
            _ => None,
        }
    }

    pub fn extract(self, obs: &BinnedObservation) -> Vec<f64> {
        let mut v = obs.p_obs[..5].to_vec();
        if self == InputFeatures::ProbabilitiesAndMean {
            v.push(obs.n_bar_obs);
        }
        v
    }
}

/// Network inputs with (optional) labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub x: Matrix,
    pub labels: Vec<Option<usize>>,
}

impl TrainingData {
    pub fn from_dataset(ds: &Dataset, features: InputFeatures) -> Self {
        let rows: Vec<Vec<f64>> = ds.rows.iter().map(|r| features.extract(&r.obs)).collect();
        let x = if rows.is_empty() {
            Matrix::zeros(0, features.input_dim())
        } else {
            Matrix::from_rows(&rows)
        };
        Self {
            x,
            labels: ds.rows.iter().map(|r| Some(r.obs.label)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    pub loss_weights: LossWeights,
    /// Seeds dropout, reparameterization noise and shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 512,
            optimizer: AdamConfig::default(),
            patience: Some(20),
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation: Option<LossBreakdown>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based); 0 when no epoch ran.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    pub fn final_train_loss(&self) -> Option<LossBreakdown> {
        self.epochs.last().map(|e| e.train)
    }
}

/// Mini-batch training with Adam. With validation data and a patience, the
/// parameters of the best validation epoch are restored at the end.
pub fn fit(vae: &mut Vae, train: &TrainingData, validation: Option<&TrainingData>, cfg: &TrainConfig) -> Result<TrainHistory> {
    if train.x.cols() != vae.spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: vae.spec.input_dim,
            got: train.x.cols(),
        });
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidPlan("batch size must be at least 2".into()));
    }
    if train.len() < 2 {
        return Err(Error::InvalidPlan("need at least two training rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.optimizer);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Vae)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut sums = LossBreakdown::default();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // a single-row batch has no batch variance
            if chunk.len() < 2 {
                continue;
            }
            let batch = train.subset(chunk);
            let step = train_step(vae, &mut adam, &batch, cfg, &mut rng)?;
            let k = chunk.len() as f64;
            sums.recon += step.recon * k;
            sums.kl += step.kl * k;
            sums.class += step.class * k;
            sums.total += step.total * k;
            seen += chunk.len();
        }
        let k = seen as f64;
        let train_loss = LossBreakdown {
            recon: sums.recon / k,
            kl: sums.kl / k,
            class: sums.class / k,
            total: sums.total / k,
        };
        let val_loss = match validation {
            Some(v) if !v.is_empty() => Some(vae.evaluate_loss(&v.x, &v.labels, &cfg.loss_weights)?),
            _ => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            train: train_loss,
            validation: val_loss,
        });

        if let (Some(v), Some(patience)) = (val_loss, cfg.patience) {
            let improved = best.as_ref().is_none_or(|(b, _)| v.total < *b);
            if improved {
                best = Some((v.total, vae.clone()));
                history.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        } else {
            history.best_epoch = epoch;
        }
    }
    if let Some((_, best_vae)) = best {
        *vae = best_vae;
    }
    Ok(history)
}

/// One optimizer update on `batch`; returns the batch's training loss.
pub fn train_step(vae: &mut Vae, adam: &mut Adam, batch: &TrainingData, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
    let noise = TrainNoise::sample(vae, batch.len(), rng);
    let step = vae.forward_backward(&batch.x, &batch.labels, &noise, &cfg.loss_weights)?;
    vae.apply_batch_stats(&step);
    let grads = step.grads.trainable();
    let mut params = vae.params.trainable_mut();
    adam.step(&mut params, &grads);
    if !vae.params.is_finite() {
        return Err(Error::NonFinite("parameters after optimizer step".into()));
    }
    Ok(step.loss)
}
