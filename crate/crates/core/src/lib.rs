//! Photon-counting simulation of classical and single-photon-added light
//! sources, and a variational-autoencoder classifier that tells them apart
//! from binned click statistics.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`distributions`]: exact photon-number distributions of coherent,
//!    thermal, single-photon-added (SPACS, SPATS) and mixed sources.
//! 2. [`detector`]: quantum-efficiency thinning and the collapse of photons
//!    onto a bank of click detectors.
//! 3. [`sampling`]: seeded Monte Carlo draws, binning into observations and
//!    labeled datasets.
//! 4. [`vae`] and [`workflows`]: training, transfer across bin sizes and
//!    the evaluation sweeps.
//!
//! ```
//! use photon_vae::detector::{observed_chain, DetectorConfig};
//! use photon_vae::distributions::SourceSpec;
//!
//! let spats = SourceSpec::spats(1.9).pmf_auto()?;
//! let clicks = observed_chain(&spats, &DetectorConfig::new(4, 0.8)?)?;
//! assert_eq!(clicks.get(5), 0.0); // four detectors, at most four clicks
//! assert!(clicks.mean() < 0.8 * spats.mean());
//! # Ok::<(), photon_vae::Error>(())
//! ```

pub mod detector;
pub mod distributions;
pub mod error;
pub mod format;
pub mod metrics;
pub mod sampling;
pub mod vae;
pub mod workflows;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/sources.md")]
    mod sources {}
    #[doc = include_str!("../../../book/src/detectors.md")]
    mod detectors {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/classifier.md")]
    mod classifier {}
    #[doc = include_str!("../../../book/src/workflows.md")]
    mod workflows {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
