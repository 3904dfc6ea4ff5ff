use ndarray::{s, Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::network::SegNet;
use crate::pseudolabel::{ProbabilityVolume, SubnetId};

/// Anything that maps a single-channel crop to `(classes, x, y, z)` probabilities.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn predict_crop(&self, crop: &Array3<f32>) -> Result<Array4<f64>>;
}

impl Predictor for SegNet {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn predict_crop(&self, crop: &Array3<f32>) -> Result<Array4<f64>> {
        self.infer(&crop.view().insert_axis(Axis(0)))
    }
}

/// Averages the probabilities of several predictors.
pub struct Ensemble<'a>(pub Vec<&'a dyn Predictor>);

impl Predictor for Ensemble<'_> {
    fn num_classes(&self) -> usize {
        self.0.first().map_or(0, |p| p.num_classes())
    }

    fn predict_crop(&self, crop: &Array3<f32>) -> Result<Array4<f64>> {
        let (first, rest) = self.0.split_first().ok_or_else(|| Error::invalid("empty ensemble"))?;
        let mut acc = first.predict_crop(crop)?;
        for p in rest {
            let out = p.predict_crop(crop)?;
            if out.dim() != acc.dim() {
                return Err(Error::shape(format!(
                    "ensemble members disagree: {:?} vs {:?}",
                    out.dim(),
                    acc.dim()
                )));
            }
            acc += &out;
        }
        acc /= self.0.len() as f64;
        Ok(acc)
    }
}

/// Window origins along one axis: multiples of `stride`, plus a last window flush with the far edge.
pub fn window_starts(dim: usize, crop: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || crop == 0 {
        return Err(Error::invalid("stride and crop must be positive"));
    }
    if stride > crop {
        return Err(Error::invalid(format!("stride {stride} exceeds crop {crop}")));
    }
    if crop > dim {
        return Err(Error::shape(format!("crop {crop} exceeds volume extent {dim}")));
    }
    let last = dim - crop;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("0 is always a start") != last {
        starts.push(last);
    }
    Ok(starts)
}

/// Tiles `image` with overlapping windows, averages the per-window
/// probabilities voxelwise and renormalizes.
pub fn sliding_window_predict(
    predictor: &dyn Predictor,
    image: &ArrayView3<f32>,
    crop_size: [usize; 3],
    stride: [usize; 3],
    source: SubnetId,
) -> Result<ProbabilityVolume> {
    let (x, y, z) = image.dim();
    let dims = [x, y, z];
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| window_starts(dims[a], crop_size[a], stride[a]))
        .collect::<Result<_>>()?;
    let classes = predictor.num_classes();
    let mut sum = Array4::<f64>::zeros((classes, x, y, z));
    let mut count = Array3::<u32>::zeros((x, y, z));
    let [cx, cy, cz] = crop_size;
    for &i in &starts[0] {
        for &j in &starts[1] {
            for &k in &starts[2] {
                let crop = image.slice(s![i..i + cx, j..j + cy, k..k + cz]).to_owned();
                let out = predictor.predict_crop(&crop)?;
                if out.dim() != (classes, cx, cy, cz) {
                    return Err(Error::shape(format!("predictor returned {:?}", out.dim())));
                }
                let mut dst = sum.slice_mut(s![.., i..i + cx, j..j + cy, k..k + cz]);
                dst += &out;
                count
                    .slice_mut(s![i..i + cx, j..j + cy, k..k + cz])
                    .mapv_inplace(|c| c + 1);
            }
        }
    }
    for mut lane in sum.lanes_mut(Axis(0)) {
        let total: f64 = lane.sum();
        if total > 0.0 {
            lane /= total;
        } else {
            lane.fill(1.0 / classes as f64);
        }
    }
    debug_assert!(count.iter().all(|&c| c > 0));
    Ok(ProbabilityVolume::new_unchecked(sum, source, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::SegNetConfig;

    struct Constant([f64; 2]);

    impl Predictor for Constant {
        fn num_classes(&self) -> usize {
            2
        }
        fn predict_crop(&self, crop: &Array3<f32>) -> Result<Array4<f64>> {
            let (x, y, z) = crop.dim();
            Ok(Array4::from_shape_fn((2, x, y, z), |(c, ..)| self.0[c]))
        }
    }

    #[test]
    fn starts_cover_and_clamp() {
        assert_eq!(window_starts(10, 4, 3).unwrap(), vec![0, 3, 6]);
        assert_eq!(window_starts(11, 4, 3).unwrap(), vec![0, 3, 6, 7]);
        assert_eq!(window_starts(4, 4, 4).unwrap(), vec![0]);
        assert!(window_starts(10, 4, 0).is_err());
        assert!(window_starts(10, 4, 5).is_err());
        for dim in 4..30 {
            for stride in 1..=4 {
                let st = window_starts(dim, 4, stride).unwrap();
                assert!((0..dim).all(|v| st.iter().any(|&s| s <= v && v < s + 4)));
            }
        }
    }

    #[test]
    fn constant_predictor_is_reproduced() {
        let img = Array3::<f32>::zeros((9, 7, 8));
        for stride in [1, 2, 3, 4] {
            let p = sliding_window_predict(
                &Constant([0.3, 0.7]),
                &img.view(),
                [4, 4, 4],
                [stride; 3],
                SubnetId::External,
            )
            .unwrap();
            assert!(p.values.index_axis(Axis(0), 0).iter().all(|&v| (v - 0.3).abs() < 1e-12));
            assert!(p.values.index_axis(Axis(0), 1).iter().all(|&v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn single_window_equals_forward() {
        let cfg = SegNetConfig {
            crop_size: [8, 8, 8],
            base_width: 2,
            depth: 1,
            ..SegNetConfig::default()
        };
        let net = SegNet::new(cfg, 3).unwrap();
        let img = Array3::from_shape_fn((8, 8, 8), |(i, j, k)| ((i * 7 + j * 3 + k) % 5) as f32 * 0.2);
        let direct = net.predict(&img, SubnetId::Sn1).unwrap();
        let slid = sliding_window_predict(&net, &img.view(), [8; 3], [8; 3], SubnetId::Sn1).unwrap();
        assert!(direct
            .values
            .iter()
            .zip(slid.values.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn ensemble_averages_members() {
        let a = Constant([0.2, 0.8]);
        let b = Constant([0.6, 0.4]);
        let e = Ensemble(vec![&a, &b]);
        let img = Array3::<f32>::zeros((6, 6, 6));
        let p = sliding_window_predict(&e, &img.view(), [4; 3], [2; 3], SubnetId::External).unwrap();
        assert!(p.values.index_axis(Axis(0), 0).iter().all(|&v| (v - 0.4).abs() < 1e-12));
        let sums = p.values.sum_axis(Axis(0));
        assert!(sums.iter().all(|&s| (s - 1.0).abs() < 1e-5));
    }
}
