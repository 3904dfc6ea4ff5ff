//! Overlap and surface-distance metrics for binary segmentations.
//!
//! Surface voxels are foreground voxels with at least one background 6-neighbour
//! or lying on the array border. Distances are pooled symmetrically: every
//! surface voxel of the prediction contributes its distance to the nearest
//! ground-truth surface voxel and vice versa. The 95th percentile interpolates
//! linearly between order statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::ProbabilityVolume;

fn check_same(a: &ArrayView3<u8>, b: &ArrayView3<u8>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("masks {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn counts(pred: &ArrayView3<u8>, gt: &ArrayView3<u8>) -> (usize, usize, usize) {
    Zip::from(pred).and(gt).fold((0, 0, 0), |(i, p, g), &a, &b| {
        let (a, b) = (a != 0, b != 0);
        (i + (a && b) as usize, p + a as usize, g + b as usize)
    })
}

/// `2|P & G| / (|P| + |G|)`, 1 when both masks are empty.
pub fn dice(pred: &ArrayView3<u8>, gt: &ArrayView3<u8>) -> Result<f64> {
    check_same(pred, gt)?;
    let (i, p, g) = counts(pred, gt);
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (p + g) as f64)
}

/// `|P & G| / |P | G|`, 1 when both masks are empty.
pub fn jaccard(pred: &ArrayView3<u8>, gt: &ArrayView3<u8>) -> Result<f64> {
    check_same(pred, gt)?;
    let (i, p, g) = counts(pred, gt);
    let union = p + g - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

/// Foreground voxels touching background through a face, or the array edge.
pub fn surface_voxels(mask: &ArrayView3<u8>) -> Vec<[usize; 3]> {
    let (nx, ny, nz) = mask.dim();
    let dims = [nx, ny, nz];
    let mut out = Vec::new();
    for ((i, j, k), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        let p = [i, j, k];
        let boundary = (0..3).any(|a| {
            if p[a] == 0 || p[a] + 1 == dims[a] {
                return true;
            }
            let mut lo = p;
            lo[a] -= 1;
            let mut hi = p;
            hi[a] += 1;
            mask[lo] == 0 || mask[hi] == 0
        });
        if boundary {
            out.push(p);
        }
    }
    out
}

/// Exact Euclidean distance from every voxel to the nearest site, by three
/// separable lower-envelope passes over squared distances.
fn distance_to_sites(dims: [usize; 3], sites: &[[usize; 3]], spacing: [f64; 3]) -> Array3<f64> {
    let mut f = Array3::<f64>::from_elem(dims, f64::INFINITY);
    for s in sites {
        f[*s] = 0.0;
    }
    for axis in 0..3 {
        let n = dims[axis];
        let mut buf = vec![0.0; n];
        let mut out = vec![0.0; n];
        for mut lane in f.lanes_mut(ndarray::Axis(axis)) {
            for (b, v) in buf.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            envelope_1d(&buf, spacing[axis], &mut out);
            for (v, o) in lane.iter_mut().zip(&out) {
                *v = *o;
            }
        }
    }
    f.mapv_inplace(f64::sqrt);
    f
}

/// `out[q] = min_p (h (q - p))^2 + f[p]` over finite `f[p]`.
fn envelope_1d(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * h;
    let sites: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let intersect =
        |a: usize, b: usize| ((f[b] + pos(b) * pos(b)) - (f[a] + pos(a) * pos(a))) / (2.0 * (pos(b) - pos(a)));
    for &q in &sites {
        while let Some(&last) = v.last() {
            let s = intersect(last, q);
            if v.len() > 1 && s <= z[z.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if let Some(&last) = v.last() {
            z.push(intersect(last, q));
        }
        v.push(q);
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k < z.len() && z[k] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Symmetric surface distance summary. `None` when either surface is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

pub fn surface_distances(pred: &ArrayView3<u8>, gt: &ArrayView3<u8>) -> Result<SurfaceDistances> {
    surface_distances_with_spacing(pred, gt, [1.0; 3])
}

pub fn surface_distances_with_spacing(
    pred: &ArrayView3<u8>,
    gt: &ArrayView3<u8>,
    spacing: [f64; 3],
) -> Result<SurfaceDistances> {
    check_same(pred, gt)?;
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    if sp.is_empty() || sg.is_empty() {
        return Ok(SurfaceDistances { hd95: None, asd: None });
    }
    let (nx, ny, nz) = pred.dim();
    let to_g = distance_to_sites([nx, ny, nz], &sg, spacing);
    let to_p = distance_to_sites([nx, ny, nz], &sp, spacing);
    let mut pooled: Vec<f64> = sp.iter().map(|v| to_g[*v]).chain(sg.iter().map(|v| to_p[*v])).collect();
    pooled.sort_by(|a, b| a.total_cmp(b));
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    Ok(SurfaceDistances {
        hd95: Some(percentile_sorted(&pooled, 95.0)),
        asd: Some(asd),
    })
}

/// Linear-interpolation percentile of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

/// Foreground is every voxel whose argmax class is not background.
pub fn foreground_mask(prob: &ProbabilityVolume) -> Array3<u8> {
    prob.argmax().mapv(|c| (c != 0) as u8)
}

pub fn evaluate_mask(case_id: &str, pred: &ArrayView3<u8>, gt: &ArrayView3<u8>) -> Result<CaseMetrics> {
    let surf = surface_distances(pred, gt)?;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        dice: dice(pred, gt)?,
        jaccard: jaccard(pred, gt)?,
        hd95: surf.hd95,
        asd: surf.asd,
    })
}

pub fn evaluate_case(case_id: &str, prob: &ProbabilityVolume, gt: &ArrayView3<u8>) -> Result<CaseMetrics> {
    let [x, y, z] = prob.spatial_shape();
    if (x, y, z) != gt.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs mask {:?}",
            (x, y, z),
            gt.dim()
        )));
    }
    evaluate_mask(case_id, &foreground_mask(prob).view(), gt)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub mean: MetricRow,
    pub std: MetricRow,
    /// Cases whose surface metrics are undefined (excluded from hd95/asd aggregates).
    pub undefined_surface: usize,
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl MetricsReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Self {
        let dice: Vec<f64> = cases.iter().map(|c| c.dice).collect();
        let jac: Vec<f64> = cases.iter().map(|c| c.jaccard).collect();
        let hd: Vec<f64> = cases.iter().filter_map(|c| c.hd95).collect();
        let asd: Vec<f64> = cases.iter().filter_map(|c| c.asd).collect();
        let (dm, ds) = mean_std(&dice).unwrap_or((0.0, 0.0));
        let (jm, js) = mean_std(&jac).unwrap_or((0.0, 0.0));
        let h = mean_std(&hd);
        let a = mean_std(&asd);
        Self {
            undefined_surface: cases.iter().filter(|c| c.hd95.is_none()).count(),
            cases,
            mean: MetricRow {
                dice: dm,
                jaccard: jm,
                hd95: h.map(|x| x.0),
                asd: a.map(|x| x.0),
            },
            std: MetricRow {
                dice: ds,
                jaccard: js,
                hd95: h.map(|x| x.1),
                asd: a.map(|x| x.1),
            },
        }
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut s = String::from("case,dice,jaccard,hd95,asd\n");
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                c.case_id,
                c.dice,
                c.jaccard,
                opt(c.hd95),
                opt(c.asd)
            );
        }
        for (name, row) in [("mean", &self.mean), ("std", &self.std)] {
            let _ = writeln!(
                s,
                "{name},{},{},{},{}",
                row.dice,
                row.jaccard,
                opt(row.hd95),
                opt(row.asd)
            );
        }
        s
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        fs::write(json_path, serde_json::to_string_pretty(self)?)?;
        fs::write(csv_path, self.to_csv())?;
        Ok(())
    }
}
