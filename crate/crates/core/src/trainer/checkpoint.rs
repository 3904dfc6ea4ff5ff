//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "DUOSEGCK"
//! u32       format version
//! u64       header length H
//! H bytes   JSON header: config, iteration, sampler and loop rng states,
//!           best metric, tensor table (name, length, byte offset)
//! rest      tensor blob, f32 LE, in tensor-table order
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::step::TrainState;
use crate::data::CropSampler;
use crate::error::{Error, Result};
use crate::network::{build_dual, Sgd};

const MAGIC: &[u8; 8] = b"DUOSEGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Best evaluation seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestMetric {
    pub iteration: usize,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    iteration: usize,
    sampler: CropSampler,
    rng: ChaCha8Rng,
    best: Option<BestMetric>,
    tensors: Vec<TensorEntry>,
}

/// Training state plus the best-metric snapshot, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub state: TrainState,
    pub best: Option<BestMetric>,
}

fn groups(state: &TrainState) -> Vec<(&'static str, Vec<&[f32]>)> {
    vec![
        ("subnet_1", state.nets.subnet_1.params()),
        ("subnet_2", state.nets.subnet_2.params()),
        ("momentum_1", state.opt_1.velocity.iter().map(Vec::as_slice).collect()),
        ("momentum_2", state.opt_2.velocity.iter().map(Vec::as_slice).collect()),
    ]
}

impl CheckpointRecord {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        for (group, params) in groups(&self.state) {
            for (i, p) in params.iter().enumerate() {
                tensors.push(TensorEntry {
                    name: format!("{group}.{i}"),
                    len: p.len(),
                    offset: blob.len(),
                });
                blob.extend(p.iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        let header = serde_json::to_vec(&Header {
            config: self.state.config.clone(),
            iteration: self.state.iteration,
            sampler: self.state.sampler.clone(),
            rng: self.state.rng.clone(),
            best: self.best,
            tensors,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((header.len() as u64).to_le_bytes());
        out.extend(header);
        out.extend(blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let blob_start = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..blob_start]).map_err(|e| bad(e.to_string()))?;
        let blob = &bytes[blob_start..];

        let mut nets = build_dual(
            &header.config.network,
            header.config.seeds.model_1,
            header.config.seeds.model_2,
        )?;
        let expected: Vec<usize> = nets.subnet_1.params().iter().map(|p| p.len()).collect();
        let per_group = expected.len();
        if header.tensors.len() != 4 * per_group {
            return Err(bad(format!(
                "expected {} tensors, found {}",
                4 * per_group,
                header.tensors.len()
            )));
        }
        let mut decoded: Vec<Vec<f32>> = Vec::with_capacity(header.tensors.len());
        for (k, t) in header.tensors.iter().enumerate() {
            if t.len != expected[k % per_group] {
                return Err(bad(format!(
                    "tensor {} has length {}, expected {}",
                    t.name,
                    t.len,
                    expected[k % per_group]
                )));
            }
            let end = t
                .offset
                .checked_add(t.len * 4)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| bad(format!("tensor {} runs past the end of the file", t.name)))?;
            decoded.push(
                blob[t.offset..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        let mut it = decoded.chunks(per_group);
        let (w1, w2, v1, v2) = (
            it.next().expect("four groups"),
            it.next().expect("four groups"),
            it.next().expect("four groups"),
            it.next().expect("four groups"),
        );
        nets.subnet_1.load_params(w1)?;
        nets.subnet_2.load_params(w2)?;
        let (mu, wd) = (header.config.momentum as f32, header.config.weight_decay as f32);
        let mut opt_1 = Sgd::new(&nets.subnet_1, mu, wd);
        let mut opt_2 = Sgd::new(&nets.subnet_2, mu, wd);
        opt_1.velocity = v1.to_vec();
        opt_2.velocity = v2.to_vec();
        Ok(Self {
            state: TrainState {
                config: header.config,
                nets,
                opt_1,
                opt_2,
                sampler: header.sampler,
                rng: header.rng,
                iteration: header.iteration,
            },
            best: header.best,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}
