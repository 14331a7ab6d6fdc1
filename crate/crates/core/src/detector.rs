//! Detector losses: Bernoulli thinning by the quantum efficiency, then the
//! collapse of photon numbers onto a bank of click detectors behind a
//! balanced beamsplitter tree.
//!
//! Each detector reports at most one click per observation (the low-rate
//! regime of a dead-time-limited detector). With `j` photons spread
//! uniformly over `N` detectors the click count is the number of occupied
//! detectors, whose distribution is tabulated in [`ClickCoefficients`].

use serde::{Deserialize, Serialize};

use crate::distributions::{PhotonPmf, SourceSpec};
use crate::error::{Error, Result};

/// Number of click-count probabilities recorded per observation, `P(0..=6)`.
pub const RECORDED_COUNTS: usize = 7;

/// Largest detector count whose clicks fit in the recorded support.
pub const MAX_RECORDED_DETECTORS: usize = RECORDED_COUNTS - 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub n_detectors: usize,
    pub efficiency: f64,
}

impl DetectorConfig {
    pub fn new(n_detectors: usize, efficiency: f64) -> Result<Self> {
        let cfg = Self {
            n_detectors,
            efficiency,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Unit efficiency with six detectors, the largest bank whose click
    /// counts fit in `P(0..=6)`.
    pub fn lossless() -> Self {
        Self {
            n_detectors: MAX_RECORDED_DETECTORS,
            efficiency: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_detectors == 0 {
            return Err(Error::DetectorCount {
                got: 0,
                max: usize::MAX,
            });
        }
        check_efficiency(self.efficiency)
    }
}

fn check_efficiency(eta: f64) -> Result<()> {
    if eta > 0.0 && eta <= 1.0 {
        Ok(())
    } else {
        Err(Error::Efficiency(eta))
    }
}

/// Probability of detecting `n` photons when each of the source's photons
/// survives independently with probability `η`:
/// `out[n] = Σ_{m≥n} C(m, n) ηⁿ (1-η)^{m-n} P(m)`.
pub fn apply_efficiency(pmf: &PhotonPmf, eta: f64) -> Result<PhotonPmf> {
    check_efficiency(eta)?;
    let probs = pmf.probs();
    let n_max = pmf.n_max();
    let mut out = vec![0.0; n_max + 1];
    // Pascal recurrence for the binomial rows b_m(n); row m is built in place.
    let mut row = vec![0.0; n_max + 1];
    row[0] = 1.0;
    for (m, &p_m) in probs.iter().enumerate() {
        if m > 0 {
            for n in (1..=m).rev() {
                row[n] = (1.0 - eta) * row[n] + eta * row[n - 1];
            }
            row[0] *= 1.0 - eta;
        }
        if p_m != 0.0 {
            for n in 0..=m {
                out[n] += row[n] * p_m;
            }
        }
    }
    Ok(PhotonPmf::from_parts_unchecked(out))
}

/// `C(n, j)`: probability that `j` photons routed uniformly to `N`
/// detectors occupy exactly `n` of them.
#[derive(Clone, Debug, PartialEq)]
pub struct ClickCoefficients {
    n_detectors: usize,
    // table[j][n], n in 0..=min(j, N)
    table: Vec<Vec<f64>>,
}

impl ClickCoefficients {
    pub fn new(n_detectors: usize, j_max: usize) -> Result<Self> {
        if n_detectors == 0 {
            return Err(Error::DetectorCount {
                got: 0,
                max: usize::MAX,
            });
        }
        let nd = n_detectors as f64;
        let mut table = Vec::with_capacity(j_max + 1);
        table.push(vec![1.0]);
        for j in 1..=j_max {
            let prev: &Vec<f64> = &table[j - 1];
            let width = j.min(n_detectors) + 1;
            let mut row = vec![0.0; width];
            // the next photon lands on an occupied detector (n/N) or a fresh one ((N-n)/N)
            for (n, slot) in row.iter_mut().enumerate() {
                let stay = prev.get(n).map_or(0.0, |&c| c * n as f64 / nd);
                let grow = if n > 0 {
                    prev.get(n - 1)
                        .map_or(0.0, |&c| c * (nd - (n - 1) as f64) / nd)
                } else {
                    0.0
                };
                *slot = stay + grow;
            }
            table.push(row);
        }
        Ok(Self { n_detectors, table })
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn j_max(&self) -> usize {
        self.table.len() - 1
    }

    /// `C(n, j)`; zero outside `n ≤ min(j, N)` and for `j > j_max`.
    pub fn get(&self, n: usize, j: usize) -> f64 {
        self.table
            .get(j)
            .and_then(|row| row.get(n))
            .copied()
            .unwrap_or(0.0)
    }

    /// The distribution of occupied detectors for `j` photons.
    pub fn row(&self, j: usize) -> &[f64] {
        &self.table[j]
    }
}

/// `click_coefficients(N, j_max)`.
pub fn click_coefficients(n_detectors: usize, j_max: usize) -> Result<ClickCoefficients> {
    ClickCoefficients::new(n_detectors, j_max)
}

/// Observed click distribution `out[n] = Σ_{j≥n} C(n, j) P(j)`, padded
/// with zeros to at least `P(0..=6)`.
pub fn apply_click_model(pmf: &PhotonPmf, n_detectors: usize) -> Result<PhotonPmf> {
    let coeffs = ClickCoefficients::new(n_detectors, pmf.n_max())?;
    Ok(apply_click_coefficients(pmf, &coeffs))
}

pub fn apply_click_coefficients(pmf: &PhotonPmf, coeffs: &ClickCoefficients) -> PhotonPmf {
    assert!(
        coeffs.j_max() >= pmf.n_max(),
        "coefficient table too short for distribution"
    );
    let width = pmf.n_max().min(coeffs.n_detectors()) + 1;
    let mut out = vec![0.0; width.max(RECORDED_COUNTS)];
    for (j, &p) in pmf.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (n, &c) in coeffs.row(j).iter().enumerate() {
            out[n] += c * p;
        }
    }
    PhotonPmf::from_parts_unchecked(out)
}

/// Efficiency loss followed by the click collapse.
pub fn observed_chain(pmf: &PhotonPmf, cfg: &DetectorConfig) -> Result<PhotonPmf> {
    cfg.validate()?;
    let thinned = apply_efficiency(pmf, cfg.efficiency)?;
    apply_click_model(&thinned, cfg.n_detectors)
}

/// Analytic observed click distribution of a source behind a detector.
pub fn observed_pmf(source: &SourceSpec, cfg: &DetectorConfig) -> Result<PhotonPmf> {
    observed_chain(&source.pmf_auto()?, cfg)
}

/// Analytic mean click count of a source behind a detector.
pub fn observed_mean(source: &SourceSpec, cfg: &DetectorConfig) -> Result<f64> {
    Ok(observed_pmf(source, cfg)?.mean())
}
