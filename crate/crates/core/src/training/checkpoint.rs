//! Binary checkpoints: magic, `u32` format version, `u64` header length, a
//! JSON header, then raw little-endian `f64` data for the parameters and the
//! two Adam moment buffers, each in canonical leaf order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig, TrainState};
use crate::encoder::{init_params, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::numerics::Array;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VMELAB\x00\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Enough to recreate every random stream after `step` completed steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Parameters,
    pub optimizer: OptimizerState,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    leaves: Vec<LeafInfo>,
    adam_t: u64,
    rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LeafInfo {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn from_state(model: &ModelConfig, train: &TrainConfig, state: &TrainState) -> Self {
        Self {
            model: model.clone(),
            train: train.clone(),
            params: state.params.clone(),
            optimizer: state.optimizer.clone(),
            rng: RngState {
                seed: train.seed,
                step: state.step,
            },
        }
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            step: self.rng.step,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            leaves: self
                .params
                .named()
                .into_iter()
                .map(|(name, a)| LeafInfo {
                    name,
                    shape: a.shape.clone(),
                })
                .collect(),
            adam_t: self.optimizer.t,
            rng: self.rng,
        };
        let json = serde_json::to_vec(&header)?;
        let n: usize = self.params.count();
        let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + 3 * 8 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for tree in [&self.params, &self.optimizer.m, &self.optimizer.v] {
            for leaf in tree.leaves() {
                for x in &leaf.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| bad("truncated file"));
        if take(0, 8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(take(12, 8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(20, hlen)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.version != version {
            return Err(bad("header version disagrees with container"));
        }
        header.model.validate()?;
        let template = init_params(&ModelConfig { seed: 0, ..header.model.clone() })?;
        let expected = template.named();
        if expected.len() != header.leaves.len()
            || expected
                .iter()
                .zip(&header.leaves)
                .any(|((n, a), l)| *n != l.name || a.shape != l.shape)
        {
            return Err(bad("parameter layout does not match the model config"));
        }
        let n = template.count();
        let body = &bytes[20 + hlen..];
        if body.len() != 3 * 8 * n {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes of arrays, found {}",
                3 * 8 * n,
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut read_tree = || -> Result<Parameters> {
            let leaves = header
                .leaves
                .iter()
                .map(|l| {
                    let k: usize = l.shape.iter().product();
                    Array::new(&l.shape, values.by_ref().take(k).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            template.with_leaves(leaves)
        };
        let params = read_tree()?;
        let m = read_tree()?;
        let v = read_tree()?;
        Ok(Self {
            model: header.model,
            train: header.train,
            params,
            optimizer: OptimizerState { m, v, t: header.adam_t },
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
