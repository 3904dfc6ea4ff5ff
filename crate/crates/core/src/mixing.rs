//! CutMix masks and their application to unlabeled image pairs and label pairs.

use ndarray::{s, Array3, Array4, ArrayView3, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::pseudolabel::PseudoLabel;
use crate::volgeom::CropBox;

/// Binary mask that is 1 everywhere except inside `patch`, where it is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CutMixMask {
    pub mask: Array3<u8>,
    pub patch: CropBox,
}

impl CutMixMask {
    /// Builds a mask from an explicit patch; the patch must be a strict sub-box.
    pub fn from_patch(crop_size: [usize; 3], patch: CropBox) -> Result<Self> {
        patch.check_within(crop_size)?;
        let total: usize = crop_size.iter().product();
        if patch.voxel_count() >= total {
            return Err(Error::invalid("cutmix patch must be smaller than the crop"));
        }
        let mut mask = Array3::<u8>::ones(crop_size);
        let [ox, oy, oz] = patch.origin.map(|o| o as usize);
        let [sx, sy, sz] = patch.size;
        mask.slice_mut(s![ox..ox + sx, oy..oy + sy, oz..oz + sz]).fill(0);
        Ok(Self { mask, patch })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (x, y, z) = self.mask.dim();
        [x, y, z]
    }

    pub fn ones_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Samples a single cuboid patch with sides `round(ratio * side)` at a uniform origin.
pub fn sample_mask<R: Rng + ?Sized>(crop_size: [usize; 3], ratio: f64, rng: &mut R) -> Result<CutMixMask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("cutmix ratio must lie in (0, 1), got {ratio}")));
    }
    let side = crop_size.map(|n| (ratio * n as f64).round() as usize);
    if side.contains(&0) {
        return Err(Error::invalid(format!(
            "cutmix ratio {ratio} gives an empty patch for crop {crop_size:?}"
        )));
    }
    let mut origin = [0usize; 3];
    for axis in 0..3 {
        origin[axis] = rng.random_range(0..=crop_size[axis] - side[axis]);
    }
    CutMixMask::from_patch(crop_size, CropBox::at(origin, side)?)
}

fn check_shape<T>(a: &ArrayView3<T>, mask: &CutMixMask) -> Result<()> {
    let d = a.dim();
    if [d.0, d.1, d.2] != mask.shape() {
        return Err(Error::shape(format!(
            "array {:?} does not match mask {:?}",
            d,
            mask.shape()
        )));
    }
    Ok(())
}

/// Returns `(p*M + q*(1-M), q*M + p*(1-M))`. With a binary mask this is a voxel
/// select, so the pair sums to `p + q` exactly.
pub fn apply_cutmix_pair<T: Copy>(
    x_p: &ArrayView3<T>,
    x_q: &ArrayView3<T>,
    mask: &CutMixMask,
) -> Result<(Array3<T>, Array3<T>)> {
    check_shape(x_p, mask)?;
    check_shape(x_q, mask)?;
    let out_p = Zip::from(x_p)
        .and(x_q)
        .and(&mask.mask)
        .map_collect(|&p, &q, &m| if m == 1 { p } else { q });
    let out_q = Zip::from(x_q)
        .and(x_p)
        .and(&mask.mask)
        .map_collect(|&q, &p, &m| if m == 1 { q } else { p });
    Ok((out_p, out_q))
}

/// Mixes two pseudo-labels with the same mask used for their images, channel by channel.
pub fn apply_cutmix_labels(
    l_p: &PseudoLabel,
    l_q: &PseudoLabel,
    mask: &CutMixMask,
) -> Result<(PseudoLabel, PseudoLabel)> {
    if l_p.shape() != l_q.shape() {
        return Err(Error::shape(format!("labels {:?} vs {:?}", l_p.shape(), l_q.shape())));
    }
    let mut out_p = Array4::<f64>::zeros(l_p.values.raw_dim());
    let mut out_q = Array4::<f64>::zeros(l_q.values.raw_dim());
    for c in 0..l_p.values.len_of(Axis(0)) {
        let (mp, mq) = apply_cutmix_pair(
            &l_p.values.index_axis(Axis(0), c),
            &l_q.values.index_axis(Axis(0), c),
            mask,
        )?;
        out_p.index_axis_mut(Axis(0), c).assign(&mp);
        out_q.index_axis_mut(Axis(0), c).assign(&mq);
    }
    let wrap = |values, src: &PseudoLabel| PseudoLabel {
        values,
        kind: src.kind,
        source: src.source,
        cutmixed: true,
    };
    Ok((wrap(out_p, l_p), wrap(out_q, l_q)))
}
