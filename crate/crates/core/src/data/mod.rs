//! Volumes, synthetic phantoms, labeled/unlabeled splits, crop sampling and
//! sliding-window inference.

mod io;
mod sampler;
mod sliding;
mod synth;

pub use io::{load_dataset, load_eval_masks, write_dataset, DATASET_FORMAT};
pub use sampler::{sample_training_batch, CropSampler, LabeledCrop, TrainingBatch, UnlabeledCrop};
pub use sliding::{sliding_window_predict, window_starts, Ensemble, Predictor};
pub use synth::{generate_synthetic_dataset, generate_with, GeneratorParams};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One 3D scalar image with an optional label map of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    pub image: Array3<f32>,
    pub mask: Option<Array3<u8>>,
}

impl VolumeSample {
    pub fn new(id: impl Into<String>, image: Array3<f32>, mask: Option<Array3<u8>>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.dim() != image.dim() {
                return Err(Error::shape(format!("mask {:?} vs image {:?}", m.dim(), image.dim())));
            }
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (x, y, z) = self.image.dim();
        [x, y, z]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<VolumeSample>,
    /// Images only; their masks live in [`WithheldMasks`].
    pub unlabeled: Vec<VolumeSample>,
    pub split_seed: u64,
    pub labeled_ratio: f64,
}

/// Ground truth of the unlabeled samples, kept for evaluation only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WithheldMasks(pub Vec<(String, Array3<u8>)>);

/// Seeded shuffle followed by a prefix split of `round(ratio * n)` labeled samples.
pub fn split_dataset(
    samples: Vec<VolumeSample>,
    labeled_ratio: f64,
    seed: u64,
) -> Result<(DatasetSplit, WithheldMasks)> {
    if !(labeled_ratio > 0.0 && labeled_ratio < 1.0) {
        return Err(Error::invalid(format!(
            "labeled ratio must lie in (0, 1), got {labeled_ratio}"
        )));
    }
    let total = samples.len();
    let n_labeled = (labeled_ratio * total as f64).round() as usize;
    if n_labeled == 0 || n_labeled >= total {
        return Err(Error::invalid(format!(
            "ratio {labeled_ratio} on {total} samples leaves {n_labeled} labeled"
        )));
    }
    let mut samples = samples;
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let unlabeled_full = samples.split_off(n_labeled);
    for s in &samples {
        if s.mask.is_none() {
            return Err(Error::invalid(format!("labeled sample {} has no mask", s.id)));
        }
    }
    let mut withheld = WithheldMasks::default();
    let unlabeled = unlabeled_full
        .into_iter()
        .map(|mut s| {
            if let Some(m) = s.mask.take() {
                withheld.0.push((s.id.clone(), m));
            }
            s
        })
        .collect();
    Ok((
        DatasetSplit {
            labeled: samples,
            unlabeled,
            split_seed: seed,
            labeled_ratio,
        },
        withheld,
    ))
}

/// Data section of an experiment config: what to generate and how to split it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_volumes: usize,
    pub n_test: usize,
    pub volume_size: [usize; 3],
    pub seed: u64,
    pub labeled_ratio: f64,
    pub split_seed: u64,
    pub generator: GeneratorParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_volumes: 60,
            n_test: 20,
            volume_size: [32, 32, 32],
            seed: 7,
            labeled_ratio: 0.1,
            split_seed: 7,
            generator: GeneratorParams::default(),
        }
    }
}

/// A split training set plus a held-out test set with masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: DatasetSplit,
    pub test: Vec<VolumeSample>,
    pub config: Option<DataConfig>,
}

impl Dataset {
    /// Generates training and test volumes from disjoint per-sample streams and splits the former.
    pub fn generate(cfg: &DataConfig) -> Result<(Self, WithheldMasks)> {
        let train = generate_with(&cfg.generator, cfg.n_volumes, cfg.volume_size, cfg.seed, 0, "case")?;
        let test = if cfg.n_test > 0 {
            generate_with(
                &cfg.generator,
                cfg.n_test,
                cfg.volume_size,
                cfg.seed,
                cfg.n_volumes as u64,
                "test",
            )?
        } else {
            Vec::new()
        };
        let (split, withheld) = split_dataset(train, cfg.labeled_ratio, cfg.split_seed)?;
        Ok((
            Self {
                split,
                test,
                config: Some(cfg.clone()),
            },
            withheld,
        ))
    }

    pub fn volume_shape(&self) -> Option<[usize; 3]> {
        self.split.labeled.first().map(VolumeSample::shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy(n: usize) -> Vec<VolumeSample> {
        (0..n)
            .map(|i| {
                VolumeSample::new(
                    format!("s{i}"),
                    Array3::zeros((2, 2, 2)),
                    Some(Array3::zeros((2, 2, 2))),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn split_counts() {
        let (s, w) = split_dataset(dummy(62), 0.20, 1).unwrap();
        assert_eq!((s.labeled.len(), s.unlabeled.len()), (12, 50));
        assert_eq!(w.0.len(), 50);
        let (s, _) = split_dataset(dummy(80), 0.10, 1).unwrap();
        assert_eq!((s.labeled.len(), s.unlabeled.len()), (8, 72));
        assert!(split_dataset(dummy(10), 0.001, 1).is_err());
    }

    #[test]
    fn split_is_deterministic_disjoint_and_withholds_masks() {
        let (a, _) = split_dataset(dummy(20), 0.25, 3).unwrap();
        let (b, _) = split_dataset(dummy(20), 0.25, 3).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<_> = a.labeled.iter().chain(&a.unlabeled).map(|s| s.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 20);
        assert!(a.unlabeled.iter().all(|s| s.mask.is_none()));
        assert!(a.labeled.iter().all(|s| s.mask.is_some()));
    }

    #[test]
    fn mask_shape_checked() {
        assert!(VolumeSample::new("x", Array3::zeros((2, 2, 2)), Some(Array3::zeros((2, 2, 3)))).is_err());
    }
}
