//! The three loss terms and their sum.
//!
//! Reconstruction is the (positive) mean squared error over all `N·d`
//! entries, the KL term is the closed-form divergence of a diagonal
//! Gaussian from the standard normal averaged over the batch, and the
//! classification term is cross-entropy averaged over the labeled samples
//! only.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;

/// Predicted probabilities are clamped to this interval before the log.
pub const PROB_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub recon: f64,
    pub kl: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            kl: 1.0,
            class: 1.0,
        }
    }
}

/// Loss terms of one evaluation; `total` is the weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub class: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, kl: f64, class: f64, w: &LossWeights) -> Self {
        Self {
            recon,
            kl,
            class,
            total: loss_total(recon, kl, class, w),
        }
    }
}

/// `(1 / (N·d)) Σ (x - x̂)²`.
pub fn loss_recon(x: &Matrix, x_hat: &Matrix) -> f64 {
    assert_eq!((x.rows(), x.cols()), (x_hat.rows(), x_hat.cols()));
    let n = (x.rows() * x.cols()) as f64;
    x.data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// `-(1 / 2N) Σ [1 + logvar - mu² - exp(logvar)]`.
pub fn loss_kl(mu: &Matrix, logvar: &Matrix) -> f64 {
    assert_eq!((mu.rows(), mu.cols()), (logvar.rows(), logvar.cols()));
    let n = mu.rows() as f64;
    -mu.data()
        .iter()
        .zip(logvar.data())
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
        / (2.0 * n)
}

/// Binary cross-entropy over labeled pairs `(y, ŷ)`; zero when empty.
pub fn loss_bce(y: &[f64], y_hat: &[f64]) -> f64 {
    assert_eq!(y.len(), y_hat.len());
    if y.is_empty() {
        return 0.0;
    }
    let sum: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(&y, &p)| {
            let p = p.clamp(PROB_CLAMP.0, PROB_CLAMP.1);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    -sum / y.len() as f64
}

/// Categorical cross-entropy `-(1/N_L) Σ ln p[label]` over labeled rows.
pub fn loss_categorical(labels: &[usize], probs: &[&[f64]]) -> f64 {
    assert_eq!(labels.len(), probs.len());
    if labels.is_empty() {
        return 0.0;
    }
    let sum: f64 = labels
        .iter()
        .zip(probs)
        .map(|(&c, p)| p[c].clamp(PROB_CLAMP.0, PROB_CLAMP.1).ln())
        .sum();
    -sum / labels.len() as f64
}

pub fn loss_total(recon: f64, kl: f64, class: f64, w: &LossWeights) -> f64 {
    w.recon * recon + w.kl * kl + w.class * class
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
