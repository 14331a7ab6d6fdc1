//! Truncated photon-number distributions.
//!
//! Every generator evaluates `P(n)` for `n = 0..=n_max` with iterative ratio
//! updates (no explicit factorials), then checks that the omitted tail mass
//! is at most [`TAIL_BOUND`]. Distributions are never renormalized: the
//! detector model convolves absolute probabilities, and renormalizing would
//! silently move tail mass into the retained support.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Truncation used when the source parameters allow it.
pub const DEFAULT_N_MAX: usize = 20;

/// Largest omitted tail mass a truncated distribution may carry.
pub const TAIL_BOUND: f64 = 1e-6;

/// Upper limit for [`SourceSpec::required_n_max`]'s search.
const N_MAX_SEARCH_LIMIT: usize = 4096;

/// Photon-number probabilities `P(0..=n_max)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotonPmf {
    probs: Vec<f64>,
}

impl PhotonPmf {
    /// Wraps a probability vector after checking each entry is in `[0, 1]`
    /// and the total lies in `[1 - 1e-6, 1 + 1e-12]`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidPmf("empty probability vector".into()));
        }
        if let Some((n, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::InvalidPmf(format!("P({n}) = {p} is not in [0, 1]")));
        }
        let total: f64 = probs.iter().sum();
        if total > 1.0 + 1e-12 {
            return Err(Error::InvalidPmf(format!("total probability {total} exceeds 1")));
        }
        if 1.0 - total > TAIL_BOUND {
            return Err(Error::TailTooLarge {
                tail: 1.0 - total,
                n_max: probs.len() - 1,
            });
        }
        Ok(Self { probs })
    }

    /// Used by the detector transforms, whose outputs inherit the input's
    /// normalization deficit.
    pub(crate) fn from_parts_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(!probs.is_empty());
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_max(&self) -> usize {
        self.probs.len() - 1
    }

    /// `P(n)`, zero beyond the support.
    pub fn get(&self, n: usize) -> f64 {
        self.probs.get(n).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Mass dropped by the truncation, `1 - Σ P(n)`.
    pub fn tail_mass(&self) -> f64 {
        (1.0 - self.total()).max(0.0)
    }

    pub fn mean(&self) -> f64 {
        pmf_mean(self)
    }

    /// Pads with zeros so the support is at least `0..=n_max`.
    pub fn padded(&self, n_max: usize) -> Self {
        let mut probs = self.probs.clone();
        if probs.len() < n_max + 1 {
            probs.resize(n_max + 1, 0.0);
        }
        Self { probs }
    }
}

/// `Σ n·P(n)`.
pub fn pmf_mean(pmf: &PhotonPmf) -> f64 {
    pmf.probs
        .iter()
        .enumerate()
        .map(|(n, p)| n as f64 * p)
        .sum()
}

fn check_param(name: &'static str, value: f64) -> Result<()> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::NegativeParameter { name, value })
    }
}

fn poisson_terms(mean: f64, n_max: usize) -> Vec<f64> {
    let mut probs = Vec::with_capacity(n_max + 1);
    let mut p = (-mean).exp();
    probs.push(p);
    for n in 1..=n_max {
        p *= mean / n as f64;
        probs.push(p);
    }
    probs
}

fn geometric_terms(nbar: f64, n_max: usize) -> Vec<f64> {
    let ratio = nbar / (1.0 + nbar);
    let mut probs = Vec::with_capacity(n_max + 1);
    let mut p = 1.0 / (1.0 + nbar);
    probs.push(p);
    for _ in 1..=n_max {
        p *= ratio;
        probs.push(p);
    }
    probs
}

/// Poisson statistics of a coherent state with mean photon number `|α|²`.
pub fn coherent_pmf(mean: f64, n_max: usize) -> Result<PhotonPmf> {
    check_param("coherent mean", mean)?;
    PhotonPmf::new(poisson_terms(mean, n_max))
}

/// Bose–Einstein statistics `n̄ⁿ / (1 + n̄)ⁿ⁺¹` of a thermal state.
pub fn thermal_pmf(nbar: f64, n_max: usize) -> Result<PhotonPmf> {
    check_param("thermal mean", nbar)?;
    PhotonPmf::new(geometric_terms(nbar, n_max))
}

/// Single-photon-added coherent state `|α, 1⟩`:
///
/// `P(n) = e^{-|α|²}/(1+|α|²) · [ |α|^{2(n-1)}/(n-1)! + |α|²·|α|^{2(n-2)}/(n-2)! ]`
///
/// Terms with a negative factorial argument are zero, so `P(0) = 0` and
/// `P(1)` keeps only the first term.
pub fn spacs_pmf(alpha_sq: f64, n_max: usize) -> Result<PhotonPmf> {
    check_param("|alpha|^2", alpha_sq)?;
    // poisson[k] = e^{-a} a^k / k!, so P(n) = (poisson[n-1] + a·poisson[n-2]) / (1 + a).
    let poisson = poisson_terms(alpha_sq, n_max);
    let scale = 1.0 / (1.0 + alpha_sq);
    let mut probs = vec![0.0; n_max + 1];
    for n in 1..=n_max {
        let mut term = poisson[n - 1];
        if n >= 2 {
            term += alpha_sq * poisson[n - 2];
        }
        probs[n] = scale * term;
    }
    PhotonPmf::new(probs)
}

/// Single-photon-added thermal state, `P(n) = n·n̄ⁿ⁻¹ / (1 + n̄)ⁿ⁺¹` for
/// `n ≥ 1` and `P(0) = 0`.
pub fn spats_pmf(nbar: f64, n_max: usize) -> Result<PhotonPmf> {
    check_param("thermal mean", nbar)?;
    // n̄ⁿ⁻¹/(1+n̄)ⁿ⁺¹ = thermal(n-1) / (1+n̄)
    let thermal = geometric_terms(nbar, n_max);
    let scale = 1.0 / (1.0 + nbar);
    let mut probs = vec![0.0; n_max + 1];
    for n in 1..=n_max {
        probs[n] = n as f64 * thermal[n - 1] * scale;
    }
    PhotonPmf::new(probs)
}

/// Photon statistics of the statistical mixture `r·base + (1 - r)·added`.
pub fn mixed_pmf(base: &PhotonPmf, added: &PhotonPmf, r: f64) -> Result<PhotonPmf> {
    if base.n_max() != added.n_max() {
        return Err(Error::SupportMismatch {
            left: base.n_max(),
            right: added.n_max(),
        });
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::MixRatio(r));
    }
    let probs = base
        .probs
        .iter()
        .zip(&added.probs)
        .map(|(b, a)| r * b + (1.0 - r) * a)
        .collect();
    PhotonPmf::new(probs)
}

/// The light-source families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Coherent,
    Thermal,
    Spacs,
    Spats,
    MixedCoherentSpacs,
    MixedThermalSpats,
}

impl SourceKind {
    pub const ALL: [SourceKind; 6] = [
        SourceKind::Coherent,
        SourceKind::Thermal,
        SourceKind::Spacs,
        SourceKind::Spats,
        SourceKind::MixedCoherentSpacs,
        SourceKind::MixedThermalSpats,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Coherent => "coherent",
            SourceKind::Thermal => "thermal",
            SourceKind::Spacs => "spacs",
            SourceKind::Spats => "spats",
            SourceKind::MixedCoherentSpacs => "mixed_coherent_spacs",
            SourceKind::MixedThermalSpats => "mixed_thermal_spats",
        }
    }

    pub fn is_mixed(self) -> bool {
        matches!(
            self,
            SourceKind::MixedCoherentSpacs | SourceKind::MixedThermalSpats
        )
    }
}

impl std::fmt::Display for SourceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SourceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidDataset(format!("unknown source kind {s:?}")))
    }
}

/// A light source: its family, its mean parameter (`|α|²` for the coherent
/// family, the initial `n̄` for the thermal family) and, for mixtures, the
/// weight `r` of the base state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub kind: SourceKind,
    pub mean_param: f64,
    #[serde(default = "default_mix_ratio")]
    pub mix_ratio: f64,
}

fn default_mix_ratio() -> f64 {
    1.0
}

impl SourceSpec {
    pub fn new(kind: SourceKind, mean_param: f64) -> Self {
        Self {
            kind,
            mean_param,
            mix_ratio: 1.0,
        }
    }

    pub fn coherent(alpha_sq: f64) -> Self {
        Self::new(SourceKind::Coherent, alpha_sq)
    }

    pub fn thermal(nbar: f64) -> Self {
        Self::new(SourceKind::Thermal, nbar)
    }

    pub fn spacs(alpha_sq: f64) -> Self {
        Self::new(SourceKind::Spacs, alpha_sq)
    }

    pub fn spats(nbar: f64) -> Self {
        Self::new(SourceKind::Spats, nbar)
    }

    pub fn mixed_coherent_spacs(alpha_sq: f64, r: f64) -> Self {
        Self {
            kind: SourceKind::MixedCoherentSpacs,
            mean_param: alpha_sq,
            mix_ratio: r,
        }
    }

    pub fn mixed_thermal_spats(nbar: f64, r: f64) -> Self {
        Self {
            kind: SourceKind::MixedThermalSpats,
            mean_param: nbar,
            mix_ratio: r,
        }
    }

    /// Non-mixed kinds carry `r = 1`.
    pub fn canonical(self) -> Self {
        if self.kind.is_mixed() {
            self
        } else {
            Self {
                mix_ratio: 1.0,
                ..self
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_param("mean parameter", self.mean_param)?;
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::MixRatio(self.mix_ratio));
        }
        Ok(())
    }

    /// The distribution truncated at `n_max`; fails if the tail bound does
    /// not hold there.
    pub fn pmf(&self, n_max: usize) -> Result<PhotonPmf> {
        self.validate()?;
        let m = self.mean_param;
        match self.kind {
            SourceKind::Coherent => coherent_pmf(m, n_max),
            SourceKind::Thermal => thermal_pmf(m, n_max),
            SourceKind::Spacs => spacs_pmf(m, n_max),
            SourceKind::Spats => spats_pmf(m, n_max),
            SourceKind::MixedCoherentSpacs => mixed_pmf(
                &coherent_pmf(m, n_max)?,
                &spacs_pmf(m, n_max)?,
                self.mix_ratio,
            ),
            SourceKind::MixedThermalSpats => mixed_pmf(
                &thermal_pmf(m, n_max)?,
                &spats_pmf(m, n_max)?,
                self.mix_ratio,
            ),
        }
    }

    /// Smallest `n_max ≥ 20` whose tail is within [`TAIL_BOUND`].
    pub fn required_n_max(&self) -> Result<usize> {
        self.validate()?;
        let mut n_max = DEFAULT_N_MAX;
        loop {
            match self.pmf(n_max) {
                Ok(_) => return Ok(n_max),
                Err(Error::TailTooLarge { tail, .. }) if n_max >= N_MAX_SEARCH_LIMIT => {
                    return Err(Error::TailTooLarge { tail, n_max });
                }
                Err(Error::TailTooLarge { .. }) => n_max += 4,
                Err(e) => return Err(e),
            }
        }
    }

    /// The distribution at the smallest admissible truncation.
    pub fn pmf_auto(&self) -> Result<PhotonPmf> {
        self.pmf(self.required_n_max()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn coherent_vacuum_and_first_term() {
        let vac = coherent_pmf(0.0, 20).unwrap();
        assert_eq!(vac.get(0), 1.0);
        assert!(vac.probs()[1..].iter().all(|&p| p == 0.0));

        let p = coherent_pmf(1.0, 20).unwrap();
        assert_abs_diff_eq!(p.get(0), 0.367_879_441_171_442_3, epsilon = 1e-15);
    }

    #[test]
    fn coherent_partial_sum_and_mean() {
        let p = coherent_pmf(1.3, 20).unwrap();
        // partial-sum oracle
        let mut term = (-1.3f64).exp();
        let mut sum = term;
        for n in 1..=20 {
            term *= 1.3 / n as f64;
            sum += term;
        }
        assert!((1.0 - sum).abs() < 1e-6);
        assert_abs_diff_eq!(p.total(), sum, epsilon = 1e-15);
        assert_abs_diff_eq!(pmf_mean(&p), 1.3, epsilon = 1e-5);
    }

    #[test]
    fn thermal_values() {
        let vac = thermal_pmf(0.0, 20).unwrap();
        assert_eq!(vac.probs()[0], 1.0);
        let p = thermal_pmf(1.0, 30).unwrap();
        assert_eq!(p.get(0), 0.5);
        assert_eq!(p.get(1), 0.25);
        let p = thermal_pmf(1.0, 60).unwrap();
        assert_abs_diff_eq!(p.mean(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn thermal_rejects_short_truncation() {
        // (1.9/2.9)^21 ≈ 1.4e-4 of tail mass beyond n = 20
        assert!(matches!(
            thermal_pmf(1.9, 20),
            Err(Error::TailTooLarge { n_max: 20, .. })
        ));
    }

    #[test]
    fn spacs_values() {
        let p = spacs_pmf(1.0, 20).unwrap();
        assert_eq!(p.get(0), 0.0);
        assert_abs_diff_eq!(p.get(1), 0.183_939_720_585_721_2, epsilon = 1e-15);

        let fock = spacs_pmf(0.0, 20).unwrap();
        assert_eq!(fock.get(0), 0.0);
        assert_eq!(fock.get(1), 1.0);
        assert!(fock.probs()[2..].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn spacs_mode_for_large_amplitude() {
        let p = spacs_pmf(25.0, 80).unwrap();
        let argmax = p
            .probs()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!(argmax == 25 || argmax == 26, "argmax {argmax}");
    }

    #[test]
    fn spats_values() {
        let p = spats_pmf(1.0, 80).unwrap();
        assert_eq!(p.get(0), 0.0);
        assert_abs_diff_eq!(p.get(1), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p.mean(), 3.0, epsilon = 1e-6);
    }

    #[test]
    fn spats_mean_identity() {
        for &nbar in &[0.1, 0.5, 1.0, 1.3, 1.9, 2.0] {
            let p = spats_pmf(nbar, 120).unwrap();
            assert_abs_diff_eq!(p.mean(), 2.0 * nbar + 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn negative_parameters_rejected() {
        assert!(matches!(
            coherent_pmf(-0.1, 20),
            Err(Error::NegativeParameter { .. })
        ));
        assert!(thermal_pmf(-1.0, 20).is_err());
        assert!(spacs_pmf(-1.0, 20).is_err());
        assert!(spats_pmf(f64::NAN, 20).is_err());
    }

    #[test]
    fn mixed_endpoints_and_midpoint() {
        let base = PhotonPmf::new(vec![1.0, 0.0]).unwrap();
        let added = PhotonPmf::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(mixed_pmf(&base, &added, 1.0).unwrap(), base);
        assert_eq!(mixed_pmf(&base, &added, 0.0).unwrap(), added);
        assert_eq!(mixed_pmf(&base, &added, 0.5).unwrap().probs(), &[0.5, 0.5]);
    }

    #[test]
    fn mixed_errors() {
        let a = coherent_pmf(1.0, 20).unwrap();
        let b = spacs_pmf(1.0, 25).unwrap();
        assert!(matches!(
            mixed_pmf(&a, &b, 0.5),
            Err(Error::SupportMismatch { .. })
        ));
        let b = spacs_pmf(1.0, 20).unwrap();
        assert!(matches!(mixed_pmf(&a, &b, 1.5), Err(Error::MixRatio(_))));
    }

    #[test]
    fn mean_of_point_masses() {
        assert_eq!(pmf_mean(&PhotonPmf::new(vec![1.0, 0.0, 0.0]).unwrap()), 0.0);
        assert_eq!(pmf_mean(&PhotonPmf::new(vec![0.0, 1.0, 0.0]).unwrap()), 1.0);
    }

    #[test]
    fn required_n_max_respects_default_when_possible() {
        assert_eq!(SourceSpec::coherent(1.3).required_n_max().unwrap(), 20);
        let n = SourceSpec::thermal(3.0).required_n_max().unwrap();
        assert!(n > 20);
        let pmf = SourceSpec::thermal(3.0).pmf_auto().unwrap();
        assert!(pmf.tail_mass() <= TAIL_BOUND);
    }

    #[test]
    fn source_kind_names_round_trip() {
        for kind in SourceKind::ALL {
            assert_eq!(kind.as_str().parse::<SourceKind>().unwrap(), kind);
        }
    }

    #[test]
    fn pure_sources_canonicalize_ratio() {
        let s = SourceSpec {
            kind: SourceKind::Spacs,
            mean_param: 1.0,
            mix_ratio: 0.3,
        };
        assert_eq!(s.canonical().mix_ratio, 1.0);
        let m = SourceSpec::mixed_coherent_spacs(1.0, 0.3);
        assert_eq!(m.canonical().mix_ratio, 0.3);
    }
}
