use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, VolumeSample};
use crate::error::{Error, Result};
use crate::volgeom::{crop_volume, shifted_crop_set, CropBox, ShiftDirection, AXIS_NAMES};

pub const LABELED_PER_BATCH: usize = 2;
pub const UNLABELED_PER_BATCH: usize = 2;

/// Random crop origins kept `sigma` voxels away from every face of the volume.
/// Labeled crops may drop the margin, since they have no shifted partners.
/// Without the unlabeled margin, fixed crops reach the faces and only the
/// shifted candidates that stay inside the volume are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSampler {
    pub crop_size: [usize; 3],
    pub sigma: i64,
    #[serde(default = "yes")]
    pub labeled_margin: bool,
    #[serde(default = "yes")]
    pub unlabeled_margin: bool,
    pub rng: ChaCha8Rng,
}

fn yes() -> bool {
    true
}

impl CropSampler {
    pub fn new(crop_size: [usize; 3], sigma: i64, seed: u64) -> Result<Self> {
        if crop_size.contains(&0) {
            return Err(Error::invalid(format!("crop size must be positive, got {crop_size:?}")));
        }
        if sigma < 0 {
            return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(Self {
            crop_size,
            sigma,
            labeled_margin: true,
            unlabeled_margin: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn with_labeled_margin(self, labeled_margin: bool) -> Self {
        Self { labeled_margin, ..self }
    }

    pub fn with_unlabeled_margin(self, unlabeled_margin: bool) -> Self {
        Self {
            unlabeled_margin,
            ..self
        }
    }

    /// Inclusive origin range `[sigma, dim - size - sigma]` for each axis.
    pub fn origin_range(&self, dim: [usize; 3]) -> Result<[(usize, usize); 3]> {
        self.range_with_margin(dim, self.sigma)
    }

    /// Origin range for unlabeled fixed crops. Without the margin the volume
    /// must still leave room for one shift per axis wherever the crop sits.
    pub fn unlabeled_origin_range(&self, dim: [usize; 3]) -> Result<[(usize, usize); 3]> {
        if self.unlabeled_margin {
            return self.origin_range(dim);
        }
        self.range_with_margin(dim, self.sigma)?;
        self.range_with_margin(dim, 0)
    }

    /// Origin range for labeled crops: `[0, dim - size]` when the margin is off.
    pub fn labeled_origin_range(&self, dim: [usize; 3]) -> Result<[(usize, usize); 3]> {
        self.range_with_margin(dim, if self.labeled_margin { self.sigma } else { 0 })
    }

    fn range_with_margin(&self, dim: [usize; 3], margin: i64) -> Result<[(usize, usize); 3]> {
        let mut out = [(0, 0); 3];
        for a in 0..3 {
            let hi = dim[a] as i64 - self.crop_size[a] as i64 - margin;
            if hi < margin {
                return Err(Error::config(format!(
                    "volume extent {} on axis {} cannot fit crop {} with margin {} on both sides",
                    dim[a], AXIS_NAMES[a], self.crop_size[a], margin
                )));
            }
            out[a] = (margin as usize, hi as usize);
        }
        Ok(out)
    }

    pub fn sample_box(&mut self, dim: [usize; 3]) -> Result<CropBox> {
        let range = self.origin_range(dim)?;
        self.draw(range)
    }

    pub fn sample_unlabeled_box(&mut self, dim: [usize; 3]) -> Result<CropBox> {
        let range = self.unlabeled_origin_range(dim)?;
        self.draw(range)
    }

    pub fn sample_labeled_box(&mut self, dim: [usize; 3]) -> Result<CropBox> {
        let range = self.labeled_origin_range(dim)?;
        self.draw(range)
    }

    fn draw(&mut self, range: [(usize, usize); 3]) -> Result<CropBox> {
        let origin = range.map(|(lo, hi)| self.rng.random_range(lo..=hi));
        CropBox::at(origin, self.crop_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCrop {
    pub id: String,
    pub bbox: CropBox,
    pub image: Array3<f32>,
    pub mask: Array3<u8>,
}

/// An unlabeled fixed crop with its four shifted neighbours. Carries no label data.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledCrop {
    pub id: String,
    pub fixed: CropBox,
    pub image: Array3<f32>,
    pub candidates: BTreeMap<ShiftDirection, (CropBox, Array3<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub labeled: Vec<LabeledCrop>,
    pub unlabeled: Vec<UnlabeledCrop>,
}

fn pick<'a>(pool: &'a [VolumeSample], rng: &mut ChaCha8Rng) -> &'a VolumeSample {
    &pool[rng.random_range(0..pool.len())]
}

/// Two labeled crops and two unlabeled crops, volumes drawn with replacement.
pub fn sample_training_batch(split: &DatasetSplit, sampler: &mut CropSampler) -> Result<TrainingBatch> {
    if split.labeled.is_empty() || split.unlabeled.is_empty() {
        return Err(Error::invalid("both labeled and unlabeled pools must be non-empty"));
    }
    let mut labeled = Vec::with_capacity(LABELED_PER_BATCH);
    for _ in 0..LABELED_PER_BATCH {
        let s = pick(&split.labeled, &mut sampler.rng);
        let mask = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("labeled sample {} has no mask", s.id)))?;
        let bbox = sampler.sample_labeled_box(s.shape())?;
        labeled.push(LabeledCrop {
            id: s.id.clone(),
            bbox,
            image: crop_volume(&s.image.view(), &bbox)?,
            mask: crop_volume(&mask.view(), &bbox)?,
        });
    }
    let mut unlabeled = Vec::with_capacity(UNLABELED_PER_BATCH);
    for _ in 0..UNLABELED_PER_BATCH {
        let s = pick(&split.unlabeled, &mut sampler.rng);
        let fixed = sampler.sample_unlabeled_box(s.shape())?;
        let candidates = if sampler.sigma > 0 {
            shifted_crop_set(&fixed, sampler.sigma)?
                .into_iter()
                .filter(|(_, b)| sampler.unlabeled_margin || b.check_within(s.shape()).is_ok())
                .map(|(d, b)| Ok((d, (b, crop_volume(&s.image.view(), &b)?))))
                .collect::<Result<_>>()?
        } else {
            BTreeMap::new()
        };
        unlabeled.push(UnlabeledCrop {
            id: s.id.clone(),
            fixed,
            image: crop_volume(&s.image.view(), &fixed)?,
            candidates,
        });
    }
    Ok(TrainingBatch { labeled, unlabeled })
}
