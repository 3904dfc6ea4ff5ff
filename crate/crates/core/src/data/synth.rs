use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::VolumeSample;
use crate::error::{Error, Result};

/// Phantom generator knobs. Radii and centres are fractions of the volume size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    pub noise_std: f64,
    /// Peak-to-peak amplitude of the linear intensity ramp.
    pub gradient_amplitude: f64,
    pub min_ellipsoids: usize,
    pub max_ellipsoids: usize,
    pub radius_fraction: [f64; 2],
    pub center_fraction: [f64; 2],
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            noise_std: 0.2,
            gradient_amplitude: 1.0,
            min_ellipsoids: 1,
            max_ellipsoids: 3,
            radius_fraction: [0.15, 0.3],
            center_fraction: [0.3, 0.7],
        }
    }
}

impl GeneratorParams {
    fn validate(&self) -> Result<()> {
        let [rlo, rhi] = self.radius_fraction;
        let [clo, chi] = self.center_fraction;
        if !(self.noise_std >= 0.0 && self.gradient_amplitude >= 0.0) {
            return Err(Error::invalid("noise and gradient amplitudes must be >= 0"));
        }
        if self.min_ellipsoids == 0 || self.min_ellipsoids > self.max_ellipsoids {
            return Err(Error::invalid("need 1 <= min_ellipsoids <= max_ellipsoids"));
        }
        if !(0.0 < rlo && rlo <= rhi && 0.0 <= clo && clo <= chi && chi <= 1.0) {
            return Err(Error::invalid("radius/center fraction ranges are malformed"));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// Rows are the ellipsoid's principal axes.
    axes: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut acc = 0.0;
        for (axis, r) in self.axes.iter().zip(self.radii) {
            let t = (axis[0] * d[0] + axis[1] * d[1] + axis[2] * d[2]) / r;
            acc += t * t;
        }
        acc <= 1.0
    }
}

/// Rotation matrix from a uniformly random unit quaternion.
fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn sample_one(params: &GeneratorParams, size: [usize; 3], rng: &mut ChaCha8Rng) -> (Array3<f32>, Array3<u8>) {
    let min_dim = *size.iter().min().expect("three axes") as f64;
    let count = rng.random_range(params.min_ellipsoids..=params.max_ellipsoids);
    let shapes: Vec<Ellipsoid> = (0..count)
        .map(|_| {
            let center = [0, 1, 2].map(|a| {
                let f = rng.random_range(params.center_fraction[0]..=params.center_fraction[1]);
                f * (size[a] - 1) as f64
            });
            let radii =
                [0, 1, 2].map(|_| rng.random_range(params.radius_fraction[0]..=params.radius_fraction[1]) * min_dim);
            Ellipsoid {
                center,
                radii,
                axes: random_rotation(rng),
            }
        })
        .collect();

    // Linear ramp along a random direction, spanning +-amplitude/2 corner to corner.
    let mut dir = [0.0f64; 3];
    for v in dir.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    dir.iter_mut().for_each(|v| *v /= n);
    let ramp_scale = params.gradient_amplitude / dir.iter().map(|v| v.abs()).sum::<f64>().max(1e-12);

    let noise = Normal::new(0.0, params.noise_std.max(0.0)).expect("finite std");
    let mask = Array3::from_shape_fn(size, |(i, j, k)| {
        let p = [i as f64, j as f64, k as f64];
        shapes.iter().any(|e| e.contains(p)) as u8
    });
    let image = Array3::from_shape_fn(size, |(i, j, k)| {
        let mut ramp = 0.0;
        for (a, c) in [i, j, k].into_iter().enumerate() {
            let u = if size[a] > 1 {
                c as f64 / (size[a] - 1) as f64 - 0.5
            } else {
                0.0
            };
            ramp += u * dir[a] * ramp_scale;
        }
        let eps = if params.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
        (mask[[i, j, k]] as f64 + ramp + eps) as f32
    });
    (image, mask)
}

/// Samples `n` phantom volumes; sample `i` draws from stream `stream_offset + i` of `seed`.
pub fn generate_with(
    params: &GeneratorParams,
    n: usize,
    volume_size: [usize; 3],
    seed: u64,
    stream_offset: u64,
    prefix: &str,
) -> Result<Vec<VolumeSample>> {
    if n == 0 {
        return Err(Error::invalid("need at least one volume"));
    }
    if volume_size.iter().any(|&d| d < 4) {
        return Err(Error::invalid(format!("volume size {volume_size:?} is too small")));
    }
    params.validate()?;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_offset + i as u64);
            let (image, mask) = sample_one(params, volume_size, &mut rng);
            VolumeSample::new(format!("{prefix}_{i:04}"), image, Some(mask))
        })
        .collect()
}

/// Ellipsoid-union phantoms with default generator settings.
pub fn generate_synthetic_dataset(n: usize, volume_size: [usize; 3], seed: u64) -> Result<Vec<VolumeSample>> {
    generate_with(&GeneratorParams::default(), n, volume_size, seed, 0, "case")
}
