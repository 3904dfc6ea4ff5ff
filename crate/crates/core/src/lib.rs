//! Co-training semi-supervised volumetric segmentation with fixed and dynamic
//! pseudo-labels.
//!
//! Two subnets supervise each other on unlabeled crops. Each subnet learns
//! from the other's sharpened prediction on the same crop (the fixed
//! pseudo-label) and from a composite label built from a crop shifted by
//! `sigma` voxels (the dynamic pseudo-label). The second subnet sees CutMix
//! images and correspondingly mixed targets.

pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mixing;
pub mod network;
pub mod plot;
pub mod pseudolabel;
pub mod trainer;
pub mod volgeom;

pub use error::{Error, Result};
