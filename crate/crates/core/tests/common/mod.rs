//! Independent reference implementations shared by the integration and
//! acceptance targets. Nothing here calls into the library code it checks.
#![allow(dead_code)]

use duoseg::data::DataConfig;
use duoseg::network::SegNetConfig;
use duoseg::trainer::TrainConfig;
use duoseg::volgeom::{CropBox, ShiftDirection};
use ndarray::{Array3, Array4};

/// Dynamic label by walking global coordinates voxel by voxel.
pub fn brute_force_compose(
    fixed: &Array3<f64>,
    temp: &Array3<f64>,
    fixed_box: &CropBox,
    shifted_box: &CropBox,
) -> Array3<f64> {
    let (nx, ny, nz) = fixed.dim();
    let mut out = Array3::zeros((nx, ny, nz));
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let g = [
                    fixed_box.origin[0] + i as i64,
                    fixed_box.origin[1] + j as i64,
                    fixed_box.origin[2] + k as i64,
                ];
                let local: Vec<i64> = (0..3).map(|a| g[a] - shifted_box.origin[a]).collect();
                let inside = (0..3).all(|a| local[a] >= 0 && local[a] < shifted_box.size[a] as i64);
                out[[i, j, k]] = if inside {
                    temp[[local[0] as usize, local[1] as usize, local[2] as usize]]
                } else {
                    fixed[[i, j, k]]
                };
            }
        }
    }
    out
}

pub fn direction_offset(dir: ShiftDirection, sigma: i64) -> [i64; 3] {
    match dir {
        ShiftDirection::LeftX => [-sigma, 0, 0],
        ShiftDirection::RightX => [sigma, 0, 0],
        ShiftDirection::DownY => [0, -sigma, 0],
        ShiftDirection::UpY => [0, sigma, 0],
    }
}

fn fg(m: &Array3<u8>, i: i64, j: i64, k: i64) -> bool {
    let (nx, ny, nz) = m.dim();
    if i < 0 || j < 0 || k < 0 || i >= nx as i64 || j >= ny as i64 || k >= nz as i64 {
        return false;
    }
    m[[i as usize, j as usize, k as usize]] != 0
}

/// Foreground voxels with a background face neighbour or on the border.
pub fn brute_surface(m: &Array3<u8>) -> Vec<[i64; 3]> {
    let (nx, ny, nz) = m.dim();
    let mut out = Vec::new();
    for i in 0..nx as i64 {
        for j in 0..ny as i64 {
            for k in 0..nz as i64 {
                if !fg(m, i, j, k) {
                    continue;
                }
                let nbrs = [
                    (i - 1, j, k),
                    (i + 1, j, k),
                    (i, j - 1, k),
                    (i, j + 1, k),
                    (i, j, k - 1),
                    (i, j, k + 1),
                ];
                if nbrs.iter().any(|&(a, b, c)| !fg(m, a, b, c)) {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

fn nearest(p: [i64; 3], set: &[[i64; 3]]) -> f64 {
    set.iter()
        .map(|q| {
            let d2: i64 = (0..3).map(|a| (p[a] - q[a]) * (p[a] - q[a])).sum();
            (d2 as f64).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Returns `(dice, jaccard, hd95, asd)` from set counting and a double loop over surfaces.
pub fn brute_metrics(pred: &Array3<u8>, gt: &Array3<u8>) -> (f64, f64, Option<f64>, Option<f64>) {
    let mut inter = 0usize;
    let mut np = 0usize;
    let mut ng = 0usize;
    for (a, b) in pred.iter().zip(gt.iter()) {
        let (a, b) = (*a != 0, *b != 0);
        inter += (a && b) as usize;
        np += a as usize;
        ng += b as usize;
    }
    let dice = if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    };
    let union = np + ng - inter;
    let jac = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let sp = brute_surface(pred);
    let sg = brute_surface(gt);
    if sp.is_empty() || sg.is_empty() {
        return (dice, jac, None, None);
    }
    let mut d: Vec<f64> = sp.iter().map(|&p| nearest(p, &sg)).collect();
    d.extend(sg.iter().map(|&g| nearest(g, &sp)));
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let asd = d.iter().sum::<f64>() / d.len() as f64;
    let pos = 0.95 * (d.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    let t = pos - lo as f64;
    (dice, jac, Some(d[lo] + t * (d[hi] - d[lo])), Some(asd))
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn numeric_grad(x: &Array4<f64>, h: f64, f: impl Fn(&Array4<f64>) -> f64) -> Array4<f64> {
    let mut g = Array4::zeros(x.raw_dim());
    let mut probe = x.clone();
    for (idx, &v) in x.indexed_iter() {
        probe[idx] = v + h;
        let up = f(&probe);
        probe[idx] = v - h;
        let down = f(&probe);
        probe[idx] = v;
        g[idx] = (up - down) / (2.0 * h);
    }
    g
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm.
pub fn relative_error(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// A small run that trains in well under a second per iteration.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        max_iterations: 12,
        eval_every: 0,
        checkpoint_every: 0,
        stride: [8, 8, 8],
        network: SegNetConfig {
            crop_size: [8, 8, 8],
            base_width: 2,
            depth: 1,
            ..SegNetConfig::default()
        },
        data: DataConfig {
            n_volumes: 10,
            n_test: 2,
            volume_size: [18, 18, 18],
            labeled_ratio: 0.2,
            ..DataConfig::default()
        },
        ..TrainConfig::default()
    }
}
