//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MMAE1" | version u32 | count u64
//! count × ( name_len u64 | name bytes | rank u64 | rank × dim u64 | values f64 )
//! config_len u64 | config TOML bytes | seed u64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::train::{AdamWState, PretrainState, TrainConfig};

pub const MAGIC: &[u8; 5] = b"MMAE1";
pub const VERSION: u32 = 1;
/// Magic, version and tensor count.
pub const HEADER_LEN: usize = 5 + 4 + 8;

const M_PREFIX: &str = "adamw.m/";
const V_PREFIX: &str = "adamw.v/";
const STEP: &str = "adamw.step";
const EPOCH: &str = "train.epoch";
const LOSSES: &str = "train.losses";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config snapshot: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    /// TOML text of the run configuration.
    pub config: String,
    pub seed: u64,
}

/// Configuration stored alongside the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSnapshot {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u64).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u64("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.len("name length")?;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let rank = r.len("rank")?;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.len("dims")?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8).map(|_| n))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape {shape:?} overflows")))?;
            let raw = r.take(n * 8, "values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
            }
        }
        let len = r.len("config length")?;
        let config = String::from_utf8(r.take(len, "config")?.to_vec())
            .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
        let seed = r.u64("seed")?;
        if r.at != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Ok(Self { tensors, config, seed })
    }

    /// Model parameters plus, when present, optimizer and progress records.
    pub fn from_state(state: &PretrainState, model: &ModelConfig, train: &TrainConfig) -> Result<Self, CheckpointError> {
        let mut tensors: BTreeMap<String, Tensor> =
            state.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (n, t) in &state.optimizer.m {
            tensors.insert(format!("{M_PREFIX}{n}"), t.clone());
        }
        for (n, t) in &state.optimizer.v {
            tensors.insert(format!("{V_PREFIX}{n}"), t.clone());
        }
        tensors.insert(STEP.into(), Tensor::vector(vec![state.optimizer.step as f64]));
        tensors.insert(EPOCH.into(), Tensor::vector(vec![state.epoch as f64]));
        tensors.insert(LOSSES.into(), Tensor::vector(state.losses.clone()));
        let snapshot = RunSnapshot {
            model: model.clone(),
            train: train.clone(),
        };
        Ok(Self {
            tensors,
            config: toml::to_string(&snapshot).map_err(|e| CheckpointError::Config(e.to_string()))?,
            seed: train.seed,
        })
    }

    pub fn snapshot(&self) -> Result<RunSnapshot, CheckpointError> {
        toml::from_str(&self.config).map_err(|e| CheckpointError::Config(e.to_string()))
    }

    pub fn params(&self) -> ModelParams {
        ModelParams::from_map(
            self.tensors
                .iter()
                .filter(|(n, _)| !n.starts_with("adamw.") && !n.starts_with("train."))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        )
    }

    pub fn pretrain_state(&self) -> Result<PretrainState, CheckpointError> {
        let scalar = |name: &str| -> Result<f64, CheckpointError> {
            match self.tensors.get(name) {
                Some(t) if t.data().len() == 1 => Ok(t.data()[0]),
                _ => Err(CheckpointError::Malformed(format!("missing scalar {name}"))),
            }
        };
        let moments = |prefix: &str| -> BTreeMap<String, Tensor> {
            self.tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|k| (k.to_string(), t.clone())))
                .collect()
        };
        let losses = self
            .tensors
            .get(LOSSES)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing {LOSSES}")))?;
        Ok(PretrainState {
            params: self.params(),
            optimizer: AdamWState {
                m: moments(M_PREFIX),
                v: moments(V_PREFIX),
                step: scalar(STEP)? as u64,
            },
            epoch: scalar(EPOCH)? as usize,
            losses: losses.data().to_vec(),
        })
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| CheckpointError::Malformed(format!("{what} {v} too large")))
    }
}

/// Writes to a temporary file in the target directory, then renames it.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&ckpt.to_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
