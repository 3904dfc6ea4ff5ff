//! Dense kernels on `(channels, voxels)` feature matrices.
//!
//! A feature map is a row-major `Array2<f32>` whose row is a channel and whose
//! column is the flattened `(x, y, z)` voxel index, `z` fastest.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};

pub type Dims = [usize; 3];

pub fn voxel_count(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

pub fn half(d: Dims) -> Dims {
    d.map(|n| n / 2)
}

pub fn double(d: Dims) -> Dims {
    d.map(|n| n * 2)
}

/// `a @ b`
pub fn matmul(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}

/// Valid `[lo, hi)` destination range along an axis of length `n` for kernel offset `d`.
fn shifted_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

/// Patch matrix for a 3x3x3 convolution with zero padding 1: `(c*27, voxels)`.
pub fn im2col3(x: &ArrayView2<f32>, d: Dims) -> Array2<f32> {
    let c = x.nrows();
    let n = voxel_count(d);
    let [_, ny, nz] = d;
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut col = Array2::<f32>::zeros((c * 27, n));
    let dst = col.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let s_ch = &src[ch * n..(ch + 1) * n];
        for k in 0..27 {
            let (dx, dy, dz) = ((k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1);
            let row = &mut dst[(ch * 27 + k) * n..(ch * 27 + k + 1) * n];
            let (x0, x1) = shifted_range(d[0], dx);
            let (y0, y1) = shifted_range(ny, dy);
            let (z0, z1) = shifted_range(nz, dz);
            for i in x0..x1 {
                let si = (i as isize + dx) as usize;
                for j in y0..y1 {
                    let sj = (j as isize + dy) as usize;
                    let o = (i * ny + j) * nz;
                    let so = (si * ny + sj) * nz;
                    let sz0 = (z0 as isize + dz) as usize;
                    row[o + z0..o + z1].copy_from_slice(&s_ch[so + sz0..so + sz0 + (z1 - z0)]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col3`]: scatters patch gradients back onto the voxel grid.
pub fn col2im3(col: &ArrayView2<f32>, c: usize, d: Dims) -> Array2<f32> {
    let n = voxel_count(d);
    let [_, ny, nz] = d;
    let src = col.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut x = Array2::<f32>::zeros((c, n));
    let dst = x.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let d_ch = &mut dst[ch * n..(ch + 1) * n];
        for k in 0..27 {
            let (dx, dy, dz) = ((k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1);
            let row = &src[(ch * 27 + k) * n..(ch * 27 + k + 1) * n];
            let (x0, x1) = shifted_range(d[0], dx);
            let (y0, y1) = shifted_range(ny, dy);
            let (z0, z1) = shifted_range(nz, dz);
            for i in x0..x1 {
                let si = (i as isize + dx) as usize;
                for j in y0..y1 {
                    let sj = (j as isize + dy) as usize;
                    let o = (i * ny + j) * nz;
                    let so = (si * ny + sj) * nz;
                    let sz0 = (z0 as isize + dz) as usize;
                    let target = &mut d_ch[so + sz0..so + sz0 + (z1 - z0)];
                    for (t, v) in target.iter_mut().zip(&row[o + z0..o + z1]) {
                        *t += v;
                    }
                }
            }
        }
    }
    x
}

/// Folds every 2x2x2 block into channels: `(c, voxels)` on `d` becomes
/// `(c*8, voxels/8)` on `half(d)`.
pub fn space_to_depth(x: &ArrayView2<f32>, d: Dims) -> Array2<f32> {
    let c = x.nrows();
    let h = half(d);
    let (n, m) = (voxel_count(d), voxel_count(h));
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = Array2::<f32>::zeros((c * 8, m));
    let dst = out.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        for sub in 0..8 {
            let (a, b, e) = (sub / 4, (sub / 2) % 2, sub % 2);
            let row = &mut dst[(ch * 8 + sub) * m..(ch * 8 + sub + 1) * m];
            for i in 0..h[0] {
                for j in 0..h[1] {
                    for k in 0..h[2] {
                        let s = ((2 * i + a) * d[1] + 2 * j + b) * d[2] + 2 * k + e;
                        row[(i * h[1] + j) * h[2] + k] = src[ch * n + s];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`]; `d` is the fine grid.
pub fn depth_to_space(x: &ArrayView2<f32>, d: Dims) -> Array2<f32> {
    let c = x.nrows() / 8;
    let h = half(d);
    let (n, m) = (voxel_count(d), voxel_count(h));
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = Array2::<f32>::zeros((c, n));
    let dst = out.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        for sub in 0..8 {
            let (a, b, e) = (sub / 4, (sub / 2) % 2, sub % 2);
            let row = &src[(ch * 8 + sub) * m..(ch * 8 + sub + 1) * m];
            for i in 0..h[0] {
                for j in 0..h[1] {
                    for k in 0..h[2] {
                        let s = ((2 * i + a) * d[1] + 2 * j + b) * d[2] + 2 * k + e;
                        dst[ch * n + s] = row[(i * h[1] + j) * h[2] + k];
                    }
                }
            }
        }
    }
    out
}

pub const NORM_EPS: f32 = 1e-5;

pub struct NormCache {
    pub xhat: Array2<f32>,
    pub inv_std: Array1<f32>,
}

/// Per-channel instance normalization followed by the affine map.
pub fn instance_norm(y: &Array2<f32>, gamma: &Array1<f32>, beta: &Array1<f32>) -> (Array2<f32>, NormCache) {
    let n = y.ncols() as f32;
    let mut xhat = y.clone();
    let mut inv_std = Array1::<f32>::zeros(y.nrows());
    let mut out = Array2::<f32>::zeros(y.raw_dim());
    for (ch, (mut row, mut orow)) in xhat.outer_iter_mut().zip(out.outer_iter_mut()).enumerate() {
        let mean = row.sum() / n;
        let var = row.fold(0.0f32, |a, &v| a + (v - mean) * (v - mean)) / n;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[ch] = is;
        let (g, b) = (gamma[ch], beta[ch]);
        for (v, o) in row.iter_mut().zip(orow.iter_mut()) {
            *v = (*v - mean) * is;
            *o = g * *v + b;
        }
    }
    (out, NormCache { xhat, inv_std })
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn instance_norm_backward(
    dout: &Array2<f32>,
    cache: &NormCache,
    gamma: &Array1<f32>,
) -> (Array2<f32>, Array1<f32>, Array1<f32>) {
    let n = dout.ncols() as f32;
    let mut dx = Array2::<f32>::zeros(dout.raw_dim());
    let mut dgamma = Array1::<f32>::zeros(gamma.len());
    let mut dbeta = Array1::<f32>::zeros(gamma.len());
    for ch in 0..dout.nrows() {
        let g = dout.index_axis(Axis(0), ch);
        let xh = cache.xhat.index_axis(Axis(0), ch);
        let sum_g: f32 = g.sum();
        let sum_gx: f32 = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;
        let scale = gamma[ch] * cache.inv_std[ch] / n;
        for ((d, &gv), &xv) in dx.index_axis_mut(Axis(0), ch).iter_mut().zip(g.iter()).zip(xh.iter()) {
            *d = scale * (n * gv - sum_g - xv * sum_gx);
        }
    }
    (dx, dgamma, dbeta)
}
