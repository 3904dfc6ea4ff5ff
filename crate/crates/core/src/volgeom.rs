//! Crop-coordinate algebra for fixed and shifted crops.
//!
//! Axis convention: axis 0 is `x` (width), axis 1 is `y` (height), axis 2 is
//! `z` (depth). Shifts only ever move a crop along `x` or `y`. All intervals
//! are half-open `[lo, hi)` voxel indices.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{s, Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AXIS_NAMES: [char; 3] = ['x', 'y', 'z'];

/// Axis-aligned crop inside a parent volume. The origin is signed so that
/// shifted candidates can be expressed before they are validated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub origin: [i64; 3],
    pub size: [usize; 3],
}

impl CropBox {
    pub fn new(origin: [i64; 3], size: [usize; 3]) -> Result<Self> {
        if size.contains(&0) {
            return Err(Error::invalid(format!("crop size must be positive, got {size:?}")));
        }
        Ok(Self { origin, size })
    }

    /// Box at `origin` covering the whole of `size`.
    pub fn at(origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        Self::new(origin.map(|o| o as i64), size)
    }

    pub fn voxel_count(&self) -> usize {
        self.size.iter().product()
    }

    pub fn end(&self, axis: usize) -> i64 {
        self.origin[axis] + self.size[axis] as i64
    }

    pub fn translated(&self, offset: [i64; 3]) -> Self {
        Self {
            origin: [
                self.origin[0] + offset[0],
                self.origin[1] + offset[1],
                self.origin[2] + offset[2],
            ],
            size: self.size,
        }
    }

    /// Checks the box against a parent shape, naming the first offending axis.
    pub fn check_within(&self, parent: [usize; 3]) -> Result<()> {
        for axis in 0..3 {
            if self.origin[axis] < 0 || self.end(axis) > parent[axis] as i64 {
                return Err(Error::OutOfBounds {
                    axis: AXIS_NAMES[axis],
                    origin: self.origin[axis],
                    size: self.size[axis],
                    extent: parent[axis],
                });
            }
        }
        Ok(())
    }

    pub fn contains_global(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < self.end(a))
    }
}

/// One of the four in-plane shift directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ShiftDirection {
    LeftX,
    RightX,
    DownY,
    UpY,
}

impl ShiftDirection {
    pub const ALL: [ShiftDirection; 4] = [
        ShiftDirection::LeftX,
        ShiftDirection::RightX,
        ShiftDirection::DownY,
        ShiftDirection::UpY,
    ];

    pub fn offset(self, sigma: i64) -> [i64; 3] {
        match self {
            ShiftDirection::LeftX => [-sigma, 0, 0],
            ShiftDirection::RightX => [sigma, 0, 0],
            ShiftDirection::DownY => [0, -sigma, 0],
            ShiftDirection::UpY => [0, sigma, 0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShiftDirection::LeftX => "LEFT_X",
            ShiftDirection::RightX => "RIGHT_X",
            ShiftDirection::DownY => "DOWN_Y",
            ShiftDirection::UpY => "UP_Y",
        }
    }
}

impl fmt::Display for ShiftDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Half-open voxel interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub lo: usize,
    pub hi: usize,
}

impl Span {
    pub fn new(lo: usize, hi: usize) -> Self {
        debug_assert!(lo <= hi);
        Self { lo, hi }
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi == self.lo
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.lo && i < self.hi
    }
}

/// Interval triple describing a cuboid region in crop-local coordinates.
pub type Region = [Span; 3];

pub fn region_voxels(region: &Region) -> usize {
    region.iter().map(Span::len).product()
}

pub fn region_contains(region: &Region, v: [usize; 3]) -> bool {
    (0..3).all(|a| region[a].contains(v[a]))
}

/// Where a shifted crop overlaps a fixed crop, in both local frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapMap {
    pub crop_size: [usize; 3],
    pub fixed_region: Region,
    pub shifted_region: Region,
    pub complement: Vec<Region>,
}

impl OverlapMap {
    /// The degenerate map of a crop onto itself.
    pub fn identity(crop_size: [usize; 3]) -> Self {
        let full = crop_size.map(|n| Span::new(0, n));
        Self {
            crop_size,
            fixed_region: full,
            shifted_region: full,
            complement: Vec::new(),
        }
    }

    /// Maps a fixed-local voxel inside the overlap to its shifted-local index.
    pub fn to_shifted(&self, v: [usize; 3]) -> Option<[usize; 3]> {
        if !region_contains(&self.fixed_region, v) {
            return None;
        }
        Some([0, 1, 2].map(|a| v[a] - self.fixed_region[a].lo + self.shifted_region[a].lo))
    }
}

/// Extracts `volume[origin .. origin + size)` on every axis.
pub fn crop_volume<T: Clone>(volume: &ArrayView3<T>, bbox: &CropBox) -> Result<Array3<T>> {
    let dim = volume.dim();
    bbox.check_within([dim.0, dim.1, dim.2])?;
    let [ox, oy, oz] = bbox.origin.map(|o| o as usize);
    let [sx, sy, sz] = bbox.size;
    Ok(volume.slice(s![ox..ox + sx, oy..oy + sy, oz..oz + sz]).to_owned())
}

/// The four crops displaced by `sigma` voxels left/right along x and down/up along y.
pub fn shifted_crop_set(fixed: &CropBox, sigma: i64) -> Result<BTreeMap<ShiftDirection, CropBox>> {
    if sigma < 1 {
        return Err(Error::invalid(format!("shift sigma must be >= 1, got {sigma}")));
    }
    Ok(ShiftDirection::ALL
        .iter()
        .map(|&d| (d, fixed.translated(d.offset(sigma))))
        .collect())
}

/// Picks one of the four shifted candidates uniformly.
pub fn select_dynamic_crop<R: Rng + ?Sized>(
    candidates: &BTreeMap<ShiftDirection, CropBox>,
    rng: &mut R,
) -> Result<(ShiftDirection, CropBox)> {
    if candidates.len() != 4 {
        return Err(Error::invalid(format!(
            "expected 4 shifted candidates, got {}",
            candidates.len()
        )));
    }
    select_available_crop(candidates, rng)
}

/// Uniform pick among whatever candidates survived bounds filtering (at least one).
pub fn select_available_crop<R: Rng + ?Sized>(
    candidates: &BTreeMap<ShiftDirection, CropBox>,
    rng: &mut R,
) -> Result<(ShiftDirection, CropBox)> {
    if candidates.is_empty() {
        return Err(Error::invalid("no shifted candidate lies inside the volume"));
    }
    let pick = rng.random_range(0..candidates.len());
    let (dir, bbox) = candidates.iter().nth(pick).expect("index below length");
    Ok((*dir, *bbox))
}

/// Intersection of two equally-sized crops, expressed in each crop's local frame.
pub fn overlap_in_fixed_frame(fixed: &CropBox, shifted: &CropBox) -> Result<OverlapMap> {
    if fixed.size != shifted.size {
        return Err(Error::shape(format!(
            "fixed crop size {:?} differs from shifted crop size {:?}",
            fixed.size, shifted.size
        )));
    }
    let mut fixed_region = [Span::new(0, 0); 3];
    let mut shifted_region = [Span::new(0, 0); 3];
    for axis in 0..3 {
        let lo = fixed.origin[axis].max(shifted.origin[axis]);
        let hi = fixed.end(axis).min(shifted.end(axis));
        if lo >= hi {
            return Err(Error::NoOverlap);
        }
        fixed_region[axis] = Span::new((lo - fixed.origin[axis]) as usize, (hi - fixed.origin[axis]) as usize);
        shifted_region[axis] = Span::new(
            (lo - shifted.origin[axis]) as usize,
            (hi - shifted.origin[axis]) as usize,
        );
    }
    Ok(OverlapMap {
        crop_size: fixed.size,
        fixed_region,
        complement: complement_slabs(fixed.size, &fixed_region),
        shifted_region,
    })
}

/// Decomposes `crop \ inner` into at most six disjoint slabs.
fn complement_slabs(size: [usize; 3], inner: &Region) -> Vec<Region> {
    let mut out = Vec::new();
    // Axes before `axis` are restricted to the inner span, axes after it span the full crop.
    for axis in 0..3 {
        let mut base: Region = size.map(|n| Span::new(0, n));
        for (prev, span) in base.iter_mut().enumerate().take(axis) {
            *span = inner[prev];
        }
        for piece in [Span::new(0, inner[axis].lo), Span::new(inner[axis].hi, size[axis])] {
            if !piece.is_empty() {
                let mut slab = base;
                slab[axis] = piece;
                out.push(slab);
            }
        }
    }
    out
}

/// COM composition: the overlap is read from `temp` (through the shifted frame)
/// and every other voxel is copied from `fixed`.
pub fn compose_dynamic_label<T: Clone>(
    fixed: &ArrayView3<T>,
    temp: &ArrayView3<T>,
    overlap: &OverlapMap,
) -> Result<Array3<T>> {
    let shape = [fixed.dim().0, fixed.dim().1, fixed.dim().2];
    let tshape = [temp.dim().0, temp.dim().1, temp.dim().2];
    if shape != overlap.crop_size || tshape != overlap.crop_size {
        return Err(Error::shape(format!(
            "labels {shape:?} / {tshape:?} do not match overlap crop {:?}",
            overlap.crop_size
        )));
    }
    let mut out = fixed.to_owned();
    let [fx, fy, fz] = overlap.fixed_region;
    let [tx, ty, tz] = overlap.shifted_region;
    out.slice_mut(s![fx.lo..fx.hi, fy.lo..fy.hi, fz.lo..fz.hi])
        .assign(&temp.slice(s![tx.lo..tx.hi, ty.lo..ty.hi, tz.lo..tz.hi]));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn indexed_volume(n: usize) -> Array3<f32> {
        Array::from_iter((0..n * n * n).map(|i| i as f32))
            .into_shape_with_order((n, n, n))
            .unwrap()
    }

    #[test]
    fn crop_extracts_subarray() {
        let vol = indexed_volume(16);
        let b = CropBox::at([4, 4, 4], [8, 8, 8]).unwrap();
        let c = crop_volume(&vol.view(), &b).unwrap();
        assert_eq!(c.dim(), (8, 8, 8));
        assert_eq!(c[[0, 0, 0]], vol[[4, 4, 4]]);
        assert_eq!(c[[7, 7, 7]], vol[[11, 11, 11]]);
    }

    #[test]
    fn crop_whole_volume_is_identity() {
        let vol = indexed_volume(16);
        let b = CropBox::at([0, 0, 0], [16, 16, 16]).unwrap();
        assert_eq!(crop_volume(&vol.view(), &b).unwrap(), vol);
    }

    #[test]
    fn crop_out_of_bounds_names_axis() {
        let vol = indexed_volume(16);
        let b = CropBox::at([10, 0, 0], [8, 8, 8]).unwrap();
        match crop_volume(&vol.view(), &b) {
            Err(Error::OutOfBounds { axis, .. }) => assert_eq!(axis, 'x'),
            other => panic!("unexpected {other:?}"),
        }
        let neg = CropBox::new([0, -1, 0], [8, 8, 8]).unwrap();
        assert!(matches!(
            crop_volume(&vol.view(), &neg),
            Err(Error::OutOfBounds { axis: 'y', .. })
        ));
    }

    #[test]
    fn shifted_set_offsets() {
        let fixed = CropBox::at([5, 5, 5], [8, 8, 8]).unwrap();
        let set = shifted_crop_set(&fixed, 2).unwrap();
        assert_eq!(set[&ShiftDirection::LeftX].origin, [3, 5, 5]);
        assert_eq!(set[&ShiftDirection::RightX].origin, [7, 5, 5]);
        assert_eq!(set[&ShiftDirection::DownY].origin, [5, 3, 5]);
        assert_eq!(set[&ShiftDirection::UpY].origin, [5, 7, 5]);
        assert!(set.values().all(|b| b.size == fixed.size));

        let wide = shifted_crop_set(&fixed, 5).unwrap();
        assert_eq!(wide[&ShiftDirection::LeftX].origin, [0, 5, 5]);
        assert!(matches!(shifted_crop_set(&fixed, 0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn direction_offsets_touch_one_axis() {
        for d in ShiftDirection::ALL {
            let off = d.offset(3);
            assert_eq!(off.iter().filter(|&&o| o != 0).count(), 1);
            assert_eq!(off.iter().map(|o| o.abs()).sum::<i64>(), 3);
            assert_eq!(off[2], 0);
        }
    }

    #[test]
    fn selection_is_member_and_deterministic() {
        let fixed = CropBox::at([5, 5, 5], [8, 8, 8]).unwrap();
        let set = shifted_crop_set(&fixed, 2).unwrap();
        let a = select_dynamic_crop(&set, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = select_dynamic_crop(&set, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(set[&a.0], a.1);

        let mut short = set.clone();
        short.remove(&ShiftDirection::UpY);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(select_dynamic_crop(&short, &mut rng).is_err());
        for seed in 0..20 {
            let (d, _) = select_available_crop(&short, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_ne!(d, ShiftDirection::UpY);
        }
        assert!(select_available_crop(&BTreeMap::new(), &mut rng).is_err());
    }

    #[test]
    fn selection_frequencies_are_uniform() {
        // Each count is Binomial(n, 1/4): mean n/4, sd sqrt(n * 3/16).
        let fixed = CropBox::at([5, 5, 5], [8, 8, 8]).unwrap();
        let set = shifted_crop_set(&fixed, 2).unwrap();
        let n = 100_000usize;
        let mut counts = BTreeMap::new();
        for seed in 0..n as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d, _) = select_dynamic_crop(&set, &mut rng).unwrap();
            *counts.entry(d).or_insert(0usize) += 1;
        }
        let sd = (n as f64 * 3.0 / 16.0).sqrt();
        let mut chi2 = 0.0;
        for d in ShiftDirection::ALL {
            let c = counts[&d] as f64;
            assert!((c - n as f64 / 4.0).abs() < 4.0 * sd, "{d}: {c}");
            chi2 += (c - n as f64 / 4.0).powi(2) / (n as f64 / 4.0);
        }
        // 3 degrees of freedom, p = 0.001 critical value.
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn overlap_left_and_right() {
        let fixed = CropBox::at([10, 0, 0], [4, 1, 1]).unwrap();
        let left = overlap_in_fixed_frame(&fixed, &fixed.translated([-2, 0, 0])).unwrap();
        assert_eq!(left.fixed_region[0], Span::new(0, 2));
        assert_eq!(left.shifted_region[0], Span::new(2, 4));
        assert_eq!(left.complement.len(), 1);
        assert_eq!(left.complement[0][0], Span::new(2, 4));

        let right = overlap_in_fixed_frame(&fixed, &fixed.translated([2, 0, 0])).unwrap();
        assert_eq!(right.fixed_region[0], Span::new(2, 4));
        assert_eq!(right.shifted_region[0], Span::new(0, 2));
        assert_eq!(right.complement[0][0], Span::new(0, 2));
    }

    #[test]
    fn overlap_of_identical_boxes_is_full() {
        let fixed = CropBox::at([1, 2, 3], [4, 5, 6]).unwrap();
        let map = overlap_in_fixed_frame(&fixed, &fixed).unwrap();
        assert_eq!(map, OverlapMap::identity([4, 5, 6]));
        assert!(map.complement.is_empty());
    }

    #[test]
    fn overlap_errors() {
        let a = CropBox::at([0, 0, 0], [4, 4, 4]).unwrap();
        let far = CropBox::at([4, 0, 0], [4, 4, 4]).unwrap();
        assert!(matches!(overlap_in_fixed_frame(&a, &far), Err(Error::NoOverlap)));
        let other = CropBox::at([0, 0, 0], [4, 4, 3]).unwrap();
        assert!(matches!(overlap_in_fixed_frame(&a, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn compose_one_dimensional_cases() {
        let fixed = ndarray::arr1(&[10, 11, 12, 13])
            .into_shape_with_order((4, 1, 1))
            .unwrap();
        let temp = ndarray::arr1(&[20, 21, 22, 23])
            .into_shape_with_order((4, 1, 1))
            .unwrap();
        let b = CropBox::at([5, 0, 0], [4, 1, 1]).unwrap();

        let left = overlap_in_fixed_frame(&b, &b.translated([-2, 0, 0])).unwrap();
        let out = compose_dynamic_label(&fixed.view(), &temp.view(), &left).unwrap();
        assert_eq!(out.iter().copied().collect::<Vec<_>>(), vec![22, 23, 12, 13]);

        let right = overlap_in_fixed_frame(&b, &b.translated([2, 0, 0])).unwrap();
        let out = compose_dynamic_label(&fixed.view(), &temp.view(), &right).unwrap();
        assert_eq!(out.iter().copied().collect::<Vec<_>>(), vec![10, 11, 20, 21]);

        let id = OverlapMap::identity([4, 1, 1]);
        assert_eq!(compose_dynamic_label(&fixed.view(), &temp.view(), &id).unwrap(), temp);
    }

    #[test]
    fn compose_rejects_shape_mismatch() {
        let fixed = Array3::<u8>::zeros((4, 4, 4));
        let temp = Array3::<u8>::zeros((4, 4, 3));
        let map = OverlapMap::identity([4, 4, 4]);
        assert!(compose_dynamic_label(&fixed.view(), &temp.view(), &map).is_err());
    }

    #[test]
    fn tiling_and_mirror_symmetry() {
        let size = [6, 5, 4];
        let b = CropBox::at([8, 8, 8], size).unwrap();
        for sigma in 1..=2i64 {
            let set = shifted_crop_set(&b, sigma).unwrap();
            let maps: BTreeMap<_, _> = set
                .iter()
                .map(|(d, s)| (*d, overlap_in_fixed_frame(&b, s).unwrap()))
                .collect();
            for m in maps.values() {
                let tiled = region_voxels(&m.fixed_region) + m.complement.iter().map(region_voxels).sum::<usize>();
                assert_eq!(tiled, size.iter().product::<usize>());
            }
            let mirror = |m: &OverlapMap, axis: usize| {
                let sp = m.fixed_region[axis];
                Span::new(size[axis] - sp.hi, size[axis] - sp.lo)
            };
            let (l, r) = (&maps[&ShiftDirection::LeftX], &maps[&ShiftDirection::RightX]);
            assert_eq!(mirror(l, 0), r.fixed_region[0]);
            let (d, u) = (&maps[&ShiftDirection::DownY], &maps[&ShiftDirection::UpY]);
            assert_eq!(mirror(d, 1), u.fixed_region[1]);
        }
    }
}
