//! Probability fields, sharpening, and fixed/temporary/dynamic pseudo-labels.

use std::fmt;

use ndarray::{Array3, Array4, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::SegNet;
use crate::volgeom::{compose_dynamic_label, CropBox, OverlapMap};

/// Tolerance on the per-voxel class sum of a probability field.
pub const NORMALIZATION_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubnetId {
    Sn1,
    Sn2,
    /// Produced outside a subnet (tests, ensembles, stubs).
    External,
}

impl fmt::Display for SubnetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubnetId::Sn1 => "SN1",
            SubnetId::Sn2 => "SN2",
            SubnetId::External => "external",
        })
    }
}

/// Per-voxel class probabilities laid out as `(class, x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    pub values: Array4<f64>,
    pub source: SubnetId,
    pub crop: Option<CropBox>,
}

impl ProbabilityVolume {
    /// Validates range and normalization before wrapping.
    pub fn new(values: Array4<f64>, source: SubnetId, crop: Option<CropBox>) -> Result<Self> {
        check_distribution(&values.view())?;
        Ok(Self::new_unchecked(values, source, crop))
    }

    pub(crate) fn new_unchecked(values: Array4<f64>, source: SubnetId, crop: Option<CropBox>) -> Self {
        Self { values, source, crop }
    }

    pub fn num_classes(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let (_, x, y, z) = self.values.dim();
        [x, y, z]
    }

    /// Argmax label map; ties go to the lowest class index.
    pub fn argmax(&self) -> Array3<u8> {
        argmax_classes(&self.values.view())
    }
}

pub fn argmax_classes(values: &ArrayView4<f64>) -> Array3<u8> {
    let (c, x, y, z) = values.dim();
    Array3::from_shape_fn((x, y, z), |(i, j, k)| {
        let mut best = 0usize;
        for cls in 1..c {
            if values[[cls, i, j, k]] > values[[best, i, j, k]] {
                best = cls;
            }
        }
        best as u8
    })
}

pub fn check_distribution(values: &ArrayView4<f64>) -> Result<()> {
    if values.len_of(Axis(0)) < 2 {
        return Err(Error::shape("probability field needs at least two classes"));
    }
    if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("probability outside [0, 1]"));
    }
    let sums = values.sum_axis(Axis(0));
    if sums.iter().any(|s| (s - 1.0).abs() > NORMALIZATION_TOL) {
        return Err(Error::invalid("class probabilities do not sum to 1"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelKind {
    Fixed,
    Temporary,
    Dynamic,
}

/// A sharpened soft target. It owns plain values only, so nothing computed
/// from it can reach the weights of the subnet that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub values: Array4<f64>,
    pub kind: LabelKind,
    pub source: SubnetId,
    /// Set once the label has been through a CutMix composition.
    pub cutmixed: bool,
}

impl PseudoLabel {
    pub fn gradient_barrier(&self) -> bool {
        true
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }
}

/// Temperature sharpening `p_c^(1/T) / sum_k p_k^(1/T)`; in the binary case this
/// is `p^(1/T) / (p^(1/T) + (1-p)^(1/T))` on the foreground channel.
pub fn sharpen(probs: &ProbabilityVolume, temperature: f64, kind: LabelKind) -> Result<PseudoLabel> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if kind == LabelKind::Dynamic {
        return Err(Error::invalid("dynamic labels come from composition, not sharpening"));
    }
    Ok(PseudoLabel {
        values: sharpen_values(&probs.values.view(), temperature),
        kind,
        source: probs.source,
        cutmixed: false,
    })
}

pub(crate) fn sharpen_values(values: &ArrayView4<f64>, temperature: f64) -> Array4<f64> {
    let inv_t = 1.0 / temperature;
    let mut out = Array4::<f64>::zeros(values.raw_dim());
    // Work in the log domain; the largest class has p >= 1/C so the shift is finite.
    Zip::from(out.lanes_mut(Axis(0)))
        .and(values.lanes(Axis(0)))
        .for_each(|mut o, p| {
            let max_log = p.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.ln()));
            let mut total = 0.0;
            for (dst, &v) in o.iter_mut().zip(p.iter()) {
                let w = ((v.ln() - max_log) * inv_t).exp();
                *dst = w;
                total += w;
            }
            o.mapv_inplace(|w| w / total);
        });
    out
}

/// Inference-mode forward on one fixed crop followed by sharpening.
pub fn make_fixed_pseudo_label(
    subnet: &SegNet,
    id: SubnetId,
    fixed_crop_image: &Array3<f32>,
    temperature: f64,
) -> Result<PseudoLabel> {
    make_pseudo_labels(
        subnet,
        id,
        std::slice::from_ref(fixed_crop_image),
        temperature,
        LabelKind::Fixed,
    )
    .map(|mut v| v.remove(0))
}

/// Batched pseudo-label generation in inference mode.
pub fn make_pseudo_labels(
    subnet: &SegNet,
    id: SubnetId,
    images: &[Array3<f32>],
    temperature: f64,
    kind: LabelKind,
) -> Result<Vec<PseudoLabel>> {
    images
        .iter()
        .map(|img| {
            let probs = subnet.predict(img, id)?;
            sharpen(&probs, temperature, kind)
        })
        .collect()
}

/// Builds the dynamic label channel by channel from a fixed and a temporary label.
pub fn make_dynamic_pseudo_label(fixed: &PseudoLabel, temp: &PseudoLabel, overlap: &OverlapMap) -> Result<PseudoLabel> {
    if fixed.kind != LabelKind::Fixed || temp.kind != LabelKind::Temporary {
        return Err(Error::invalid(format!(
            "dynamic composition needs (Fixed, Temporary), got ({:?}, {:?})",
            fixed.kind, temp.kind
        )));
    }
    if fixed.shape() != temp.shape() {
        return Err(Error::shape(format!(
            "fixed label {:?} vs temporary label {:?}",
            fixed.shape(),
            temp.shape()
        )));
    }
    let mut values = Array4::<f64>::zeros(fixed.values.raw_dim());
    for (c, mut dst) in values.outer_iter_mut().enumerate() {
        let composed = compose_dynamic_label(
            &fixed.values.index_axis(Axis(0), c),
            &temp.values.index_axis(Axis(0), c),
            overlap,
        )?;
        dst.assign(&composed);
    }
    Ok(PseudoLabel {
        values,
        kind: LabelKind::Dynamic,
        source: fixed.source,
        cutmixed: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgeom::overlap_in_fixed_frame;
    use ndarray::Array;

    fn binary(fg: &[f64]) -> ProbabilityVolume {
        let n = fg.len();
        let mut v = Array4::<f64>::zeros((2, n, 1, 1));
        for (i, &p) in fg.iter().enumerate() {
            v[[1, i, 0, 0]] = p;
            v[[0, i, 0, 0]] = 1.0 - p;
        }
        ProbabilityVolume::new(v, SubnetId::External, None).unwrap()
    }

    fn fg(label: &PseudoLabel) -> Vec<f64> {
        label.values.index_axis(Axis(0), 1).iter().copied().collect()
    }

    #[test]
    fn sharpen_fixed_points_and_closed_form() {
        let p = binary(&[0.5, 1.0, 0.0, 0.7]);
        let q = sharpen(&p, 0.5, LabelKind::Fixed).unwrap();
        let f = fg(&q);
        assert!((f[0] - 0.5).abs() < 1e-15);
        assert_eq!(f[1], 1.0);
        assert_eq!(f[2], 0.0);
        assert!((f[3] - 0.49 / 0.58).abs() < 1e-12);
        assert!((f[3] - 0.844828).abs() < 1e-6);
        let sums = q.values.sum_axis(Axis(0));
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sharpen_identity_at_unit_temperature() {
        let p = binary(&[0.1, 0.33, 0.5, 0.92]);
        let q = sharpen(&p, 1.0, LabelKind::Temporary).unwrap();
        for (a, b) in q.values.iter().zip(p.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sharpen_rejects_bad_temperature() {
        let p = binary(&[0.3]);
        assert!(sharpen(&p, 0.0, LabelKind::Fixed).is_err());
        assert!(sharpen(&p, -1.0, LabelKind::Fixed).is_err());
        assert!(sharpen(&p, 0.1, LabelKind::Dynamic).is_err());
    }

    #[test]
    fn multiclass_sharpen_preserves_argmax() {
        let raw = Array::from_shape_vec((3, 2, 1, 1), vec![0.2, 0.5, 0.3, 0.1, 0.5, 0.4]).unwrap();
        let p = ProbabilityVolume::new(raw, SubnetId::External, None).unwrap();
        let q = sharpen(&p, 0.1, LabelKind::Fixed).unwrap();
        assert_eq!(argmax_classes(&q.values.view()), p.argmax());
    }

    #[test]
    fn dynamic_label_one_dimensional_case() {
        let fixed = sharpen(&binary(&[0.9, 0.9, 0.1, 0.1]), 1.0, LabelKind::Fixed).unwrap();
        let temp = sharpen(&binary(&[0.2, 0.2, 0.8, 0.8]), 1.0, LabelKind::Temporary).unwrap();
        let b = CropBox::at([4, 0, 0], [4, 1, 1]).unwrap();
        let map = overlap_in_fixed_frame(&b, &b.translated([-2, 0, 0])).unwrap();
        let d = make_dynamic_pseudo_label(&fixed, &temp, &map).unwrap();
        assert_eq!(d.kind, LabelKind::Dynamic);
        let f = fg(&d);
        let expected = [0.8, 0.8, 0.1, 0.1];
        for (a, b) in f.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dynamic_label_identity_and_equal_parts() {
        let fixed = sharpen(&binary(&[0.9, 0.4, 0.1, 0.6]), 0.1, LabelKind::Fixed).unwrap();
        let mut temp = sharpen(&binary(&[0.2, 0.3, 0.8, 0.7]), 0.1, LabelKind::Temporary).unwrap();
        let d = make_dynamic_pseudo_label(&fixed, &temp, &OverlapMap::identity([4, 1, 1])).unwrap();
        assert_eq!(d.values, temp.values);

        // A spatially uniform field looks the same from every crop position.
        let uniform = sharpen(&binary(&[0.7; 4]), 0.1, LabelKind::Fixed).unwrap();
        temp.values = uniform.values.clone();
        let fixed = uniform;
        let b = CropBox::at([4, 0, 0], [4, 1, 1]).unwrap();
        let map = overlap_in_fixed_frame(&b, &b.translated([1, 0, 0])).unwrap();
        let d = make_dynamic_pseudo_label(&fixed, &temp, &map).unwrap();
        assert_eq!(d.values, fixed.values);
    }

    #[test]
    fn dynamic_label_rejects_wrong_kinds() {
        let a = sharpen(&binary(&[0.9]), 0.1, LabelKind::Fixed).unwrap();
        let map = OverlapMap::identity([1, 1, 1]);
        assert!(make_dynamic_pseudo_label(&a, &a, &map).is_err());
    }

    #[test]
    fn probability_volume_validation() {
        let bad = Array4::<f64>::from_elem((2, 1, 1, 1), 0.7);
        assert!(ProbabilityVolume::new(bad, SubnetId::External, None).is_err());
        let ok = Array4::<f64>::from_elem((2, 1, 1, 1), 0.5);
        let p = ProbabilityVolume::new(ok, SubnetId::External, None).unwrap();
        // Tie goes to background.
        assert_eq!(p.argmax()[[0, 0, 0]], 0);
    }
}
