//! Checkpoint files.
//!
//! A checkpoint is one line of JSON (the header, terminated by `\n`)
//! followed by every parameter as a little-endian `f64`. The block holds
//! the encoder, decoder and classifier in that order; within each network,
//! hidden layer `i` contributes `weight [out×in], bias, gamma, beta,
//! running_mean, running_var`, then the output layer contributes `weight,
//! bias`. The header's `layout` lists every tensor name and length.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{NetworkSpec, Vae};
use super::train::{InputFeatures, TrainConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "photon-vae-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub spec: NetworkSpec,
    pub features: InputFeatures,
    pub init_seed: u64,
    pub train: Option<TrainConfig>,
    pub epochs_trained: usize,
    pub layout: Vec<TensorEntry>,
}

/// A model together with the provenance stored in its header.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub vae: Vae,
    pub features: InputFeatures,
    pub init_seed: u64,
    pub train: Option<TrainConfig>,
    pub epochs_trained: usize,
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            spec: self.vae.spec.clone(),
            features: self.features,
            init_seed: self.init_seed,
            train: self.train.clone(),
            epochs_trained: self.epochs_trained,
            layout: self
                .vae
                .params
                .named_tensors()
                .into_iter()
                .map(|(name, t)| TensorEntry { name, len: t.len() })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header())?;
        out.push(b'\n');
        for (_, t) in self.vae.params.named_tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: serde_json::Value = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        let format = header.get("format").and_then(|v| v.as_str());
        if format != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint(format!("not a checkpoint (format {format:?})")));
        }
        let version = header.get("version").and_then(|v| v.as_u64());
        if version != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version:?}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let header: CheckpointHeader = serde_json::from_value(header)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        if header.features.input_dim() != header.spec.input_dim {
            return Err(Error::Checkpoint("feature set does not match input_dim".into()));
        }

        let mut vae = Vae::new(header.spec.clone(), header.init_seed)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let expected: Vec<TensorEntry> = vae
            .params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| TensorEntry { name, len: t.len() })
            .collect();
        if expected != header.layout {
            return Err(Error::Checkpoint("tensor layout does not match network spec".into()));
        }
        let block = &bytes[newline + 1..];
        let total: usize = expected.iter().map(|e| e.len).sum();
        if block.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "parameter block holds {} bytes, expected {}",
                block.len(),
                total * 8
            )));
        }
        let mut values = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for t in vae.params.all_tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        Ok(Self {
            vae,
            features: header.features,
            init_seed: header.init_seed,
            train: header.train,
            epochs_trained: header.epochs_trained,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut vae = Vae::new(NetworkSpec::new(6, 2), 12).unwrap();
        vae.params.encoder.hidden[0].norm.running_mean[0] = 0.25;
        Checkpoint {
            vae,
            features: InputFeatures::ProbabilitiesAndMean,
            init_seed: 12,
            train: Some(TrainConfig::default()),
            epochs_trained: 3,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn parameter_block_is_little_endian_in_layout_order() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let start = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        let first = f64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
        assert_eq!(first, ck.vae.params.encoder.hidden[0].dense.weight[0]);
        let header = ck.header();
        assert_eq!(header.layout[0].name, "encoder.hidden0.weight");
        assert_eq!(header.layout[0].len, 6 * 16);
    }

    #[test]
    fn version_mismatch_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("\"version\":1", "\"version\":9", 1);
        let err = Checkpoint::from_bytes(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn truncated_block_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }
}
