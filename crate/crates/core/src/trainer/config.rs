use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::SegNetConfig;

/// Seeds for every random stream of a run. Data generation seeds live in [`DataConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub model_1: u64,
    pub model_2: u64,
    pub sampler: u64,
    #[serde(rename = "loop")]
    pub loop_: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            model_1: 1,
            model_2: 2,
            sampler: 3,
            loop_: 4,
        }
    }
}

impl Seeds {
    /// Seeds for replicate `k` of an experiment; replicate 0 is `self`.
    pub fn replicate(&self, k: u64) -> Self {
        let off = k * 1000;
        Self {
            model_1: self.model_1 + off,
            model_2: self.model_2 + off,
            sampler: self.sampler + off,
            loop_: self.loop_ + off,
        }
    }
}

/// Full experiment configuration. Every field has a default, so partial JSON files are accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: i64,
    pub temperature: f64,
    pub use_cutmix: bool,
    pub cutmix_ratio: f64,
    pub use_fix: bool,
    pub use_dyn: bool,
    /// Test mode: the dynamic crop is the fixed crop itself.
    pub identity_shift: bool,
    /// Keep labeled crops `sigma` voxels away from the volume faces too.
    pub labeled_margin: bool,
    /// Keep unlabeled fixed crops `sigma` voxels from the faces so all four
    /// shifts fit. When off, shifts that would leave the volume are skipped.
    pub unlabeled_margin: bool,
    /// Gaussian ramp-up length for the unsupervised terms; 0 disables it.
    pub rampup_iterations: usize,
    pub max_iterations: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_power: f64,
    pub seeds: Seeds,
    /// Evaluate every this many iterations; 0 means only at the end.
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub stride: [usize; 3],
    /// Average both subnets' probabilities at evaluation time instead of using subnet 1.
    pub ensemble: bool,
    /// Replicates used by ablation sweeps.
    pub ablation_seeds: Vec<u64>,
    pub network: SegNetConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 4.0,
            sigma: 5,
            temperature: 0.1,
            use_cutmix: true,
            cutmix_ratio: 0.5,
            use_fix: true,
            use_dyn: true,
            identity_shift: false,
            labeled_margin: true,
            unlabeled_margin: true,
            rampup_iterations: 0,
            max_iterations: 2000,
            base_lr: 5e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_power: 0.9,
            seeds: Seeds::default(),
            eval_every: 500,
            checkpoint_every: 500,
            stride: [8, 8, 8],
            ensemble: false,
            ablation_seeds: vec![0, 1, 2],
            network: SegNetConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Named starting points. `desk` is the default.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        Ok(match name {
            "desk" => base,
            "pancreas-analog" => Self {
                base_lr: 2.5e-2,
                beta: 4.0,
                data: DataConfig {
                    labeled_ratio: 0.2,
                    ..base.data.clone()
                },
                ..base
            },
            "la-analog" => Self { beta: 0.1, ..base },
            "brats-analog" => Self { beta: 1.0, ..base },
            other => return Err(Error::config(format!("unknown preset {other:?}"))),
        })
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha, self.beta).map_err(|e| Error::config(e.to_string()))
    }

    /// True when no unlabeled data takes part in training.
    pub fn supervised_only(&self) -> bool {
        !self.use_fix && !self.use_dyn
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        self.weights()?;
        self.network.validate().map_err(|e| Error::config(e.to_string()))?;
        if self.sigma < 1 {
            return bad(format!("sigma must be >= 1, got {}", self.sigma));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.cutmix_ratio > 0.0 && self.cutmix_ratio < 1.0) {
            return bad(format!("cutmix_ratio must lie in (0, 1), got {}", self.cutmix_ratio));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) || !(self.lr_power > 0.0) {
            return bad("base_lr and lr_power must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay must be >= 0".into());
        }
        let crop = self.network.crop_size;
        for a in 0..3 {
            if self.stride[a] == 0 || self.stride[a] > crop[a] {
                return bad(format!("stride {:?} must be in 1..=crop {:?}", self.stride, crop));
            }
            if self.data.volume_size[a] < crop[a] + 2 * self.sigma as usize {
                return bad(format!(
                    "volume {:?} cannot hold crop {:?} with a margin of {} voxels",
                    self.data.volume_size, crop, self.sigma
                ));
            }
        }
        if self.ablation_seeds.is_empty() {
            return bad("ablation_seeds must not be empty".into());
        }
        if self.seeds.model_1 == self.seeds.model_2 {
            return bad("seeds.model_1 and seeds.model_2 must differ".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the JSON form and
    /// must already exist; values are parsed as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let pairs = sets
            .iter()
            .map(|s| {
                let s = s.as_ref();
                let (k, v) = s
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("override {s:?} is not key=value")))?;
                let value = serde_json::from_str(v.trim()).unwrap_or_else(|_| Value::String(v.trim().to_string()));
                Ok((k.trim().to_string(), value))
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_values(&pairs)
    }

    /// Like [`TrainConfig::with_overrides`] with already-parsed values.
    pub fn with_values(&self, pairs: &[(String, Value)]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for (key, value) in pairs {
            let mut node = &mut root;
            for part in key.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
            }
            *node = value.clone();
        }
        serde_json::from_value(root).map_err(|e| Error::config(e.to_string()))
    }
}

/// Polynomial decay `base_lr * (1 - t / max)^power`.
pub fn poly_lr(iteration: usize, config: &TrainConfig) -> Result<f64> {
    let max = config.max_iterations;
    if iteration > max || max == 0 {
        return Err(Error::invalid(format!("iteration {iteration} outside 0..={max}")));
    }
    let frac = 1.0 - iteration as f64 / max as f64;
    Ok(config.base_lr * frac.powf(config.lr_power))
}
