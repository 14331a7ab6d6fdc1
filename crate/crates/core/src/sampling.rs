//! Monte Carlo click sampling, binning and labeled dataset generation.
//!
//! Every bin draws from its own ChaCha stream keyed by `(seed, class)` with
//! the bin index as stream id, so bins can be produced in any order or in
//! parallel and still come out bit-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{observed_chain, DetectorConfig, MAX_RECORDED_DETECTORS, RECORDED_COUNTS};
use crate::distributions::{PhotonPmf, SourceKind, SourceSpec};
use crate::error::{Error, Result};
use crate::format::sig9;

/// Empirical click statistics of one bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedObservation {
    /// Fractions of the bin's observations with `n = 0..=6` clicks.
    pub p_obs: [f64; RECORDED_COUNTS],
    pub n_bar_obs: f64,
    pub label: usize,
    pub bin_size: usize,
}

impl BinnedObservation {
    /// Builds the fractions from a click histogram.
    pub fn from_histogram(hist: &[u64; RECORDED_COUNTS], label: usize) -> Self {
        let bin_size: u64 = hist.iter().sum();
        assert!(bin_size > 0, "empty bin");
        let b = bin_size as f64;
        let mut p_obs = [0.0; RECORDED_COUNTS];
        for (p, &h) in p_obs.iter_mut().zip(hist) {
            *p = h as f64 / b;
        }
        let clicks: u64 = hist.iter().enumerate().map(|(n, &h)| n as u64 * h).sum();
        Self {
            p_obs,
            n_bar_obs: clicks as f64 / b,
            label,
            bin_size: bin_size as usize,
        }
    }
}

/// Inverse-CDF sampler over a truncated distribution. Residual tail mass
/// maps to the last support point.
#[derive(Clone, Debug)]
pub struct CountSampler {
    cdf: Vec<f64>,
}

impl CountSampler {
    pub fn new(pmf: &PhotonPmf) -> Self {
        let mut acc = 0.0;
        let cdf = pmf
            .probs()
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self { cdf }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c <= u);
        idx.min(self.cdf.len() - 1)
    }
}

/// `count` i.i.d. click counts drawn from `pmf`.
pub fn sample_counts<R: Rng + ?Sized>(pmf: &PhotonPmf, count: usize, rng: &mut R) -> Vec<usize> {
    let sampler = CountSampler::new(pmf);
    (0..count).map(|_| sampler.sample(rng)).collect()
}

/// Splits `counts` into consecutive bins of `bin_size`; a trailing partial
/// bin is dropped.
pub fn bin_statistics(
    counts: &[usize],
    bin_size: usize,
    label: usize,
) -> Result<Vec<BinnedObservation>> {
    if bin_size == 0 {
        return Err(Error::InvalidDataset("bin size must be positive".into()));
    }
    counts
        .chunks_exact(bin_size)
        .map(|chunk| {
            let mut hist = [0u64; RECORDED_COUNTS];
            for &c in chunk {
                if c >= RECORDED_COUNTS {
                    return Err(Error::CountOutOfRange {
                        count: c,
                        max: RECORDED_COUNTS - 1,
                    });
                }
                hist[c] += 1;
            }
            Ok(BinnedObservation::from_histogram(&hist, label))
        })
        .collect()
}

/// Generation settings for a labeled dataset; class `i` is `sources[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub sources: Vec<SourceSpec>,
    pub detector: DetectorConfig,
    pub bin_size: usize,
    pub bins_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::InvalidDataset("no sources configured".into()));
        }
        if self.bin_size == 0 {
            return Err(Error::InvalidDataset("bin size must be positive".into()));
        }
        if self.bins_per_class == 0 {
            return Err(Error::InvalidDataset("bins_per_class must be at least 1".into()));
        }
        self.detector.validate()?;
        if self.detector.n_detectors > MAX_RECORDED_DETECTORS {
            return Err(Error::DetectorCount {
                got: self.detector.n_detectors,
                max: MAX_RECORDED_DETECTORS,
            });
        }
        for s in &self.sources {
            s.validate()?;
        }
        Ok(())
    }
}

/// One dataset row: the bin statistics plus the settings that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRow {
    pub obs: BinnedObservation,
    pub source: SourceSpec,
    pub detector: DetectorConfig,
}

impl DatasetRow {
    /// Pre-loss theoretical mean parameter of the row's source.
    pub fn nbar_the(&self) -> f64 {
        self.source.mean_param
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub rows: Vec<DatasetRow>,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent random stream for `(seed, class, bin)`.
pub fn bin_rng(seed: u64, class: usize, bin: usize) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(class as u64 ^ 0xC1A5_5000));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(bin as u64);
    rng
}

fn draw_bin(sampler: &CountSampler, bin_size: usize, label: usize, rng: &mut ChaCha8Rng) -> Result<BinnedObservation> {
    let mut hist = [0u64; RECORDED_COUNTS];
    for _ in 0..bin_size {
        let c = sampler.sample(rng);
        if c >= RECORDED_COUNTS {
            return Err(Error::CountOutOfRange {
                count: c,
                max: RECORDED_COUNTS - 1,
            });
        }
        hist[c] += 1;
    }
    Ok(BinnedObservation::from_histogram(&hist, label))
}

/// Draws `bins_per_class` bins for every configured source.
pub fn generate_dataset(meta: &DatasetMeta) -> Result<Dataset> {
    meta.validate()?;
    let mut rows = Vec::with_capacity(meta.sources.len() * meta.bins_per_class);
    for (class, source) in meta.sources.iter().enumerate() {
        let source = source.canonical();
        let observed = observed_chain(&source.pmf_auto()?, &meta.detector)?;
        let sampler = CountSampler::new(&observed);
        let bins: Vec<BinnedObservation> = (0..meta.bins_per_class)
            .into_par_iter()
            .map(|b| {
                let mut rng = bin_rng(meta.seed, class, b);
                draw_bin(&sampler, meta.bin_size, class, &mut rng)
            })
            .collect::<Result<_>>()?;
        rows.extend(bins.into_iter().map(|obs| DatasetRow {
            obs,
            source,
            detector: meta.detector,
        }));
    }
    Ok(Dataset { rows })
}

pub const CSV_HEADER: [&str; 15] = [
    "p0",
    "p1",
    "p2",
    "p3",
    "p4",
    "p5",
    "p6",
    "nbar_obs",
    "label",
    "bin_size",
    "eta",
    "n_detectors",
    "nbar_the",
    "source_kind",
    "mix_ratio",
];

#[derive(Deserialize)]
struct CsvRecord {
    p0: f64,
    p1: f64,
    p2: f64,
    p3: f64,
    p4: f64,
    p5: f64,
    p6: f64,
    nbar_obs: f64,
    label: usize,
    bin_size: usize,
    eta: f64,
    n_detectors: usize,
    nbar_the: f64,
    source_kind: String,
    mix_ratio: f64,
}

/// The three stratified partitions of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.rows.iter().map(|r| r.obs.label + 1).max().unwrap_or(0)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for r in &self.rows {
            counts[r.obs.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.obs.label).collect()
    }

    pub fn extend(&mut self, other: Dataset) {
        self.rows.extend(other.rows);
    }

    /// Rewrites every row's label.
    pub fn with_label(mut self, label: usize) -> Self {
        for r in &mut self.rows {
            r.obs.label = label;
        }
        self
    }

    /// Stratified 80/10/10 split. Each class is shuffled with its own
    /// seeded stream before slicing.
    pub fn split(&self, seed: u64) -> Split {
        let mut train = Dataset::default();
        let mut validation = Dataset::default();
        let mut test = Dataset::default();
        for class in 0..self.num_classes() {
            let mut idx: Vec<usize> = (0..self.rows.len())
                .filter(|&i| self.rows[i].obs.label == class)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
            rng.set_stream(class as u64 + 1);
            shuffle(&mut idx, &mut rng);
            let n = idx.len();
            let n_train = n * 8 / 10;
            let n_val = n / 10;
            for (k, &i) in idx.iter().enumerate() {
                let row = self.rows[i].clone();
                if k < n_train {
                    train.rows.push(row);
                } else if k < n_train + n_val {
                    validation.rows.push(row);
                } else {
                    test.rows.push(row);
                }
            }
        }
        Split {
            train,
            validation,
            test,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&CSV_HEADER.join(","));
        out.push('\n');
        for r in &self.rows {
            for p in &r.obs.p_obs {
                out.push_str(&sig9(*p));
                out.push(',');
            }
            let fields = [
                sig9(r.obs.n_bar_obs),
                r.obs.label.to_string(),
                r.obs.bin_size.to_string(),
                sig9(r.detector.efficiency),
                r.detector.n_detectors.to_string(),
                sig9(r.nbar_the()),
                r.source.kind.as_str().to_string(),
                sig9(r.source.mix_ratio),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        {
            let header = reader.headers()?;
            if header.iter().ne(CSV_HEADER.iter().copied()) {
                return Err(Error::InvalidDataset(format!(
                    "{}: unexpected header {:?}",
                    path.display(),
                    header
                )));
            }
        }
        let mut rows = Vec::new();
        for rec in reader.deserialize::<CsvRecord>() {
            let rec = rec?;
            let kind: SourceKind = rec.source_kind.parse()?;
            rows.push(DatasetRow {
                obs: BinnedObservation {
                    p_obs: [rec.p0, rec.p1, rec.p2, rec.p3, rec.p4, rec.p5, rec.p6],
                    n_bar_obs: rec.nbar_obs,
                    label: rec.label,
                    bin_size: rec.bin_size,
                },
                source: SourceSpec {
                    kind,
                    mean_param: rec.nbar_the,
                    mix_ratio: rec.mix_ratio,
                },
                detector: DetectorConfig {
                    n_detectors: rec.n_detectors,
                    efficiency: rec.eta,
                },
            });
        }
        Ok(Dataset { rows })
    }
}

/// Sidecar file written next to a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub format: String,
    pub version: u32,
    pub rows: usize,
    pub meta: DatasetMeta,
}

impl DatasetSidecar {
    pub const FORMAT: &'static str = "photon-vae-dataset";

    pub fn new(meta: DatasetMeta, rows: usize) -> Self {
        Self {
            format: Self::FORMAT.to_string(),
            version: 1,
            rows,
            meta,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Fisher–Yates shuffle driven by `rng`.
pub(crate) fn shuffle<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn degenerate_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zeros = PhotonPmf::new(vec![1.0, 0.0]).unwrap();
        assert!(sample_counts(&zeros, 1000, &mut rng).iter().all(|&c| c == 0));
        let ones = PhotonPmf::new(vec![0.0, 1.0]).unwrap();
        assert!(sample_counts(&ones, 1000, &mut rng).iter().all(|&c| c == 1));
    }

    #[test]
    fn fair_coin_concentration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coin = PhotonPmf::new(vec![0.5, 0.5]).unwrap();
        let n = 1_000_000;
        let ones = sample_counts(&coin, n, &mut rng).iter().filter(|&&c| c == 1).count();
        let frac = ones as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.002, "{frac}");
    }

    #[test]
    fn tail_mass_goes_to_last_point() {
        struct Max;
        impl rand::RngCore for Max {
            fn next_u32(&mut self) -> u32 {
                u32::MAX
            }
            fn next_u64(&mut self) -> u64 {
                u64::MAX
            }
            fn fill_bytes(&mut self, dst: &mut [u8]) {
                dst.fill(0xff)
            }
        }
        let pmf = PhotonPmf::new(vec![0.5, 0.4999995]).unwrap();
        let sampler = CountSampler::new(&pmf);
        assert_eq!(sampler.sample(&mut Max), 1);
    }

    #[test]
    fn binning_examples() {
        let bins = bin_statistics(&[0, 0, 1, 1], 4, 3).unwrap();
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].p_obs, [0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(bins[0].n_bar_obs, 0.5);
        assert_eq!(bins[0].label, 3);

        let bins = bin_statistics(&vec![2; 200], 200, 0).unwrap();
        assert_eq!(bins[0].p_obs[2], 1.0);
        assert_eq!(bins[0].n_bar_obs, 2.0);
    }

    #[test]
    fn partial_bins_dropped() {
        let bins = bin_statistics(&[0, 1, 2, 3, 4], 2, 0).unwrap();
        assert_eq!(bins.len(), 2);
    }

    #[test]
    fn counts_beyond_six_rejected() {
        assert!(matches!(
            bin_statistics(&[0, 7], 2, 0),
            Err(Error::CountOutOfRange { count: 7, .. })
        ));
    }

    #[test]
    fn observation_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pmf = PhotonPmf::new(vec![0.2, 0.3, 0.2, 0.1, 0.1, 0.05, 0.05]).unwrap();
        let counts = sample_counts(&pmf, 700, &mut rng);
        for obs in bin_statistics(&counts, 70, 0).unwrap() {
            let total: f64 = obs.p_obs.iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            let mean: f64 = obs.p_obs.iter().enumerate().map(|(n, p)| n as f64 * p).sum();
            assert_abs_diff_eq!(obs.n_bar_obs, mean, epsilon = 1e-12);
            for p in obs.p_obs {
                let k = p * 70.0;
                assert_abs_diff_eq!(k, k.round(), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn meta_validation() {
        let mut meta = DatasetMeta {
            sources: vec![SourceSpec::spacs(1.0)],
            detector: DetectorConfig::lossless(),
            bin_size: 10,
            bins_per_class: 1,
            seed: 0,
        };
        assert!(meta.validate().is_ok());
        meta.detector.n_detectors = 7;
        assert!(matches!(meta.validate(), Err(Error::DetectorCount { .. })));
        meta.detector.n_detectors = 4;
        meta.bins_per_class = 0;
        assert!(meta.validate().is_err());
    }

    #[test]
    fn split_is_stratified() {
        let meta = DatasetMeta {
            sources: vec![SourceSpec::spacs(1.0), SourceSpec::spats(1.0)],
            detector: DetectorConfig::new(4, 0.9).unwrap(),
            bin_size: 20,
            bins_per_class: 100,
            seed: 9,
        };
        let ds = generate_dataset(&meta).unwrap();
        let split = ds.split(1);
        assert_eq!(split.train.class_counts(), vec![80, 80]);
        assert_eq!(split.validation.class_counts(), vec![10, 10]);
        assert_eq!(split.test.class_counts(), vec![10, 10]);
        assert_eq!(split, ds.split(1));
    }
}
