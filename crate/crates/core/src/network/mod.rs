//! A scaled-down 3D encoder-decoder segmentation network with hand-written
//! backpropagation, plus the two-subnet container used for co-training.
//!
//! Layout for `depth = D` and base width `w`:
//!
//! * level 0: two 3x3x3 conv units at full resolution, `w` channels;
//! * level `i` in `1..=D`: a 2x2x2 stride-2 conv unit then a 3x3x3 conv unit,
//!   `w * 2^i` channels, with dropout after the deepest level;
//! * decoder level `i` in `(0..D).rev()`: a 2x2x2 stride-2 transposed conv unit,
//!   additive skip from encoder level `i`, then a 3x3x3 conv unit;
//! * a 1x1x1 head over the final features concatenated with the raw input
//!   channels, giving `num_classes` logits, then a softmax over classes.
//!
//! Every unit is linear map + instance norm + ReLU. Instance statistics make a
//! batched forward identical to per-sample forwards.

mod ops;
pub mod optim;

pub use ops::Dims;
pub use optim::Sgd;

use ndarray::{s, Array1, Array2, Array3, Array4, Array5, ArrayView2, ArrayView4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::{ProbabilityVolume, SubnetId};
use ops::{
    col2im3, depth_to_space, im2col3, instance_norm, instance_norm_backward, matmul, space_to_depth, voxel_count,
    NormCache,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub crop_size: [usize; 3],
    pub dropout: f32,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            base_width: 8,
            depth: 2,
            crop_size: [16, 16, 16],
            dropout: 0.2,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be >= 2"));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::invalid("in_channels and base_width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        let factor = 1usize << self.depth;
        for (axis, &n) in self.crop_size.iter().enumerate() {
            if n == 0 || n % factor != 0 {
                return Err(Error::invalid(format!(
                    "crop size {n} on axis {axis} is not divisible by 2^{} = {factor}",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    /// 3x3x3, stride 1, zero padding 1.
    Conv3,
    /// 2x2x2, stride 2.
    Down2,
    /// Transposed 2x2x2, stride 2.
    Up2,
}

/// Linear map + instance norm + ReLU.
#[derive(Debug, Clone, PartialEq)]
struct NormUnit {
    kind: OpKind,
    cin: usize,
    cout: usize,
    weight: Array2<f32>,
    gamma: Array1<f32>,
    beta: Array1<f32>,
}

struct UnitCache {
    /// Patch matrix for Conv3/Down2, raw input for Up2.
    operand: Array2<f32>,
    in_dims: Dims,
    norm: NormCache,
    out: Array2<f32>,
}

impl NormUnit {
    fn new<R: Rng>(kind: OpKind, cin: usize, cout: usize, rng: &mut R) -> Self {
        let (rows, cols, fan_in) = match kind {
            OpKind::Conv3 => (cout, cin * 27, cin * 27),
            OpKind::Down2 => (cout, cin * 8, cin * 8),
            OpKind::Up2 => (cout * 8, cin, cin),
        };
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
        Self {
            kind,
            cin,
            cout,
            weight: Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng)),
            gamma: Array1::ones(cout),
            beta: Array1::zeros(cout),
        }
    }

    fn out_dims(&self, d: Dims) -> Dims {
        match self.kind {
            OpKind::Conv3 => d,
            OpKind::Down2 => ops::half(d),
            OpKind::Up2 => ops::double(d),
        }
    }

    fn forward(&self, x: &ArrayView2<f32>, d: Dims) -> (Array2<f32>, UnitCache) {
        let (operand, y) = match self.kind {
            OpKind::Conv3 => {
                let col = im2col3(x, d);
                let y = matmul(&self.weight.view(), &col.view());
                (col, y)
            }
            OpKind::Down2 => {
                let col = space_to_depth(x, d);
                let y = matmul(&self.weight.view(), &col.view());
                (col, y)
            }
            OpKind::Up2 => {
                let z = matmul(&self.weight.view(), x);
                (x.to_owned(), depth_to_space(&z.view(), ops::double(d)))
            }
        };
        let (mut out, norm) = instance_norm(&y, &self.gamma, &self.beta);
        out.mapv_inplace(|v| v.max(0.0));
        let cache = UnitCache {
            operand,
            in_dims: d,
            norm,
            out: out.clone(),
        };
        (out, cache)
    }

    /// Accumulates parameter gradients into `g` and returns the input gradient.
    fn backward(&self, cache: &UnitCache, dout: &Array2<f32>, g: &mut [Vec<f32>]) -> Array2<f32> {
        let mut d = dout.clone();
        ndarray::Zip::from(&mut d).and(&cache.out).for_each(|dv, &o| {
            if o <= 0.0 {
                *dv = 0.0
            }
        });
        let (dy, dgamma, dbeta) = instance_norm_backward(&d, &cache.norm, &self.gamma);
        add_into(&mut g[1], dgamma.as_slice().expect("contiguous"));
        add_into(&mut g[2], dbeta.as_slice().expect("contiguous"));
        let d_in = cache.in_dims;
        match self.kind {
            OpKind::Conv3 | OpKind::Down2 => {
                let dw = matmul(&dy.view(), &cache.operand.t());
                add_into(&mut g[0], dw.as_slice().expect("contiguous"));
                let dcol = matmul(&self.weight.t(), &dy.view());
                if self.kind == OpKind::Conv3 {
                    col2im3(&dcol.view(), self.cin, d_in)
                } else {
                    depth_to_space(&dcol.view(), d_in)
                }
            }
            OpKind::Up2 => {
                let dz = space_to_depth(&dy.view(), self.out_dims(d_in));
                let dw = matmul(&dz.view(), &cache.operand.t());
                add_into(&mut g[0], dw.as_slice().expect("contiguous"));
                matmul(&self.weight.t(), &dz.view())
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Head {
    weight: Array2<f32>,
    bias: Array1<f32>,
}

/// Everything the backward pass needs from one training-mode forward.
pub struct Tape {
    encoder: Vec<[UnitCache; 2]>,
    dropout_mask: Option<Array2<f32>>,
    decoder: Vec<[UnitCache; 2]>,
    head_input: Array2<f32>,
    probs: Array2<f64>,
    dims: Dims,
}

/// Per-parameter gradient buffers, in the same order as [`SegNet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f32>>);

impl Gradients {
    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    config: SegNetConfig,
    encoder: Vec<[NormUnit; 2]>,
    decoder: Vec<[NormUnit; 2]>,
    head: Head,
}

impl SegNet {
    pub fn new(config: SegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(config.depth + 1);
        encoder.push([
            NormUnit::new(OpKind::Conv3, config.in_channels, config.width(0), &mut rng),
            NormUnit::new(OpKind::Conv3, config.width(0), config.width(0), &mut rng),
        ]);
        for level in 1..=config.depth {
            encoder.push([
                NormUnit::new(OpKind::Down2, config.width(level - 1), config.width(level), &mut rng),
                NormUnit::new(OpKind::Conv3, config.width(level), config.width(level), &mut rng),
            ]);
        }
        let decoder = (0..config.depth)
            .map(|level| {
                [
                    NormUnit::new(OpKind::Up2, config.width(level + 1), config.width(level), &mut rng),
                    NormUnit::new(OpKind::Conv3, config.width(level), config.width(level), &mut rng),
                ]
            })
            .collect();
        let w0 = config.width(0);
        let fan_in = w0 + config.in_channels;
        let normal = Normal::new(0.0f32, (1.0 / fan_in as f32).sqrt()).expect("positive std");
        let head = Head {
            weight: Array2::from_shape_simple_fn((config.num_classes, fan_in), || normal.sample(&mut rng)),
            bias: Array1::zeros(config.num_classes),
        };
        Ok(Self {
            config,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    fn units(&self) -> impl Iterator<Item = &NormUnit> {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .flat_map(|pair| pair.iter())
    }

    /// Named parameter arrays with their shapes, in a fixed order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut push_unit = |prefix: String, u: &NormUnit| {
            specs.push((format!("{prefix}.weight"), u.weight.shape().to_vec()));
            specs.push((format!("{prefix}.gamma"), vec![u.cout]));
            specs.push((format!("{prefix}.beta"), vec![u.cout]));
        };
        for (level, pair) in self.encoder.iter().enumerate() {
            for (i, u) in pair.iter().enumerate() {
                push_unit(format!("enc{level}.{i}"), u);
            }
        }
        for (level, pair) in self.decoder.iter().enumerate() {
            for (i, u) in pair.iter().enumerate() {
                push_unit(format!("dec{level}.{i}"), u);
            }
        }
        specs.push(("head.weight".into(), self.head.weight.shape().to_vec()));
        specs.push(("head.bias".into(), vec![self.config.num_classes]));
        specs
    }

    pub fn params(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for u in self.units() {
            out.push(u.weight.as_slice().expect("contiguous"));
            out.push(u.gamma.as_slice().expect("contiguous"));
            out.push(u.beta.as_slice().expect("contiguous"));
        }
        out.push(self.head.weight.as_slice().expect("contiguous"));
        out.push(self.head.bias.as_slice().expect("contiguous"));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for pair in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            for u in pair.iter_mut() {
                out.push(u.weight.as_slice_mut().expect("contiguous"));
                out.push(u.gamma.as_slice_mut().expect("contiguous"));
                out.push(u.beta.as_slice_mut().expect("contiguous"));
            }
        }
        out.push(self.head.weight.as_slice_mut().expect("contiguous"));
        out.push(self.head.bias.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    /// Copies parameter values from flat buffers (checkpoint restore).
    pub fn load_params(&mut self, values: &[Vec<f32>]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::shape(format!(
                "expected {} parameter arrays, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (i, (dst, src)) in slots.iter_mut().zip(values).enumerate() {
            if dst.len() != src.len() {
                return Err(Error::shape(format!("parameter {i}: {} vs {}", dst.len(), src.len())));
            }
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    fn check_input(&self, c: usize, dims: Dims) -> Result<()> {
        if c != self.config.in_channels || dims != self.config.crop_size {
            return Err(Error::shape(format!(
                "input ({c}, {dims:?}) does not match network ({}, {:?})",
                self.config.in_channels, self.config.crop_size
            )));
        }
        Ok(())
    }

    fn run<R: Rng + ?Sized>(&self, x: Array2<f32>, dims: Dims, rng: Option<&mut R>) -> Tape {
        let depth = self.config.depth;
        let input = x.clone();
        let mut h = x;
        let mut d = dims;
        let mut enc_caches = Vec::with_capacity(depth + 1);
        let mut skips = Vec::with_capacity(depth);
        for (level, pair) in self.encoder.iter().enumerate() {
            let (a, ca) = pair[0].forward(&h.view(), d);
            d = pair[0].out_dims(d);
            let (b, cb) = pair[1].forward(&a.view(), d);
            enc_caches.push([ca, cb]);
            if level < depth {
                skips.push(b.clone());
            }
            h = b;
        }
        let dropout_mask = match rng {
            Some(rng) if self.config.dropout > 0.0 => {
                let p = self.config.dropout;
                let keep = 1.0 / (1.0 - p);
                let mask =
                    Array2::from_shape_simple_fn(h.raw_dim(), || if rng.random::<f32>() < p { 0.0 } else { keep });
                h *= &mask;
                Some(mask)
            }
            _ => None,
        };
        let mut dec_caches: Vec<Option<[UnitCache; 2]>> = (0..depth).map(|_| None).collect();
        for level in (0..depth).rev() {
            let pair = &self.decoder[level];
            let (mut u, cu) = pair[0].forward(&h.view(), d);
            d = pair[0].out_dims(d);
            u += &skips[level];
            let (o, co) = pair[1].forward(&u.view(), d);
            dec_caches[level] = Some([cu, co]);
            h = o;
        }
        let h = ndarray::concatenate(Axis(0), &[h.view(), input.view()]).expect("same voxel count");
        let mut logits = matmul(&self.head.weight.view(), &h.view());
        logits += &self.head.bias.view().insert_axis(Axis(1));
        let probs = softmax_columns(&logits);
        Tape {
            encoder: enc_caches,
            dropout_mask,
            decoder: dec_caches
                .into_iter()
                .map(|c| c.expect("every level visited"))
                .collect(),
            head_input: h,
            probs,
            dims,
        }
    }

    fn sample_matrix(&self, image: &ArrayView4<f32>) -> Result<(Array2<f32>, Dims)> {
        let (c, x, y, z) = image.dim();
        let dims = [x, y, z];
        self.check_input(c, dims)?;
        let flat = image
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, voxel_count(dims)))
            .expect("contiguous");
        Ok((flat, dims))
    }

    /// Training-mode forward of one `(channels, x, y, z)` sample; returns class
    /// probabilities `(classes, x, y, z)` and the tape for [`SegNet::backward`].
    pub fn forward_train<R: Rng + ?Sized>(&self, image: &ArrayView4<f32>, rng: &mut R) -> Result<(Array4<f64>, Tape)> {
        let (x, dims) = self.sample_matrix(image)?;
        let tape = self.run(x, dims, Some(rng));
        Ok((probs_to_volume(&tape.probs, dims), tape))
    }

    /// Inference-mode forward of one sample (dropout disabled).
    pub fn infer(&self, image: &ArrayView4<f32>) -> Result<Array4<f64>> {
        let (x, dims) = self.sample_matrix(image)?;
        let tape = self.run::<ChaCha8Rng>(x, dims, None);
        Ok(probs_to_volume(&tape.probs, dims))
    }

    /// Inference on a single-channel crop, wrapped as a probability volume.
    pub fn predict(&self, image: &Array3<f32>, id: SubnetId) -> Result<ProbabilityVolume> {
        let view = image.view().insert_axis(Axis(0));
        Ok(ProbabilityVolume::new_unchecked(self.infer(&view)?, id, None))
    }

    /// Batched forward over `B x C x W' x H' x L'`; per-sample results are
    /// independent of the batch they travel in.
    pub fn forward<R: Rng + ?Sized>(&self, batch: &Array5<f32>, mode: Mode, rng: &mut R) -> Result<Array5<f32>> {
        let (b, _, x, y, z) = batch.dim();
        let mut out = Array5::<f32>::zeros((b, self.config.num_classes, x, y, z));
        for (i, sample) in batch.outer_iter().enumerate() {
            let probs = match mode {
                Mode::Train => self.forward_train(&sample, rng)?.0,
                Mode::Inference => self.infer(&sample)?,
            };
            out.index_axis_mut(Axis(0), i).assign(&probs.mapv(|v| v as f32));
        }
        Ok(out)
    }

    /// Backpropagates `d loss / d probs` through the tape and adds parameter
    /// gradients into `grads`.
    pub fn backward(&self, tape: &Tape, dprobs: &ArrayView4<f64>, grads: &mut Gradients) -> Result<()> {
        let n = voxel_count(tape.dims);
        let classes = self.config.num_classes;
        if dprobs.dim() != (classes, tape.dims[0], tape.dims[1], tape.dims[2]) {
            return Err(Error::shape(format!("gradient {:?} does not match tape", dprobs.dim())));
        }
        let dp = dprobs
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((classes, n))
            .expect("contiguous");
        // Softmax Jacobian in f64: dz = p * (dp - sum_c p dp).
        let mut dlogits = Array2::<f32>::zeros((classes, n));
        for v in 0..n {
            let mut dot = 0.0;
            for c in 0..classes {
                dot += tape.probs[[c, v]] * dp[[c, v]];
            }
            for c in 0..classes {
                dlogits[[c, v]] = (tape.probs[[c, v]] * (dp[[c, v]] - dot)) as f32;
            }
        }

        let g = &mut grads.0;
        let units_per_pair = 2 * 3;
        let head_base = (self.encoder.len() + self.decoder.len()) * units_per_pair;
        let dw = matmul(&dlogits.view(), &tape.head_input.t());
        add_into(&mut g[head_base], dw.as_slice().expect("contiguous"));
        let db = dlogits.sum_axis(Axis(1));
        add_into(&mut g[head_base + 1], db.as_slice().expect("contiguous"));
        let w0 = self.config.width(0);
        let mut dh = matmul(&self.head.weight.slice(s![.., ..w0]).t(), &dlogits.view());

        let dec_base = self.encoder.len() * units_per_pair;
        let mut dskips = Vec::with_capacity(self.decoder.len());
        for (level, pair) in self.decoder.iter().enumerate() {
            let base = dec_base + level * units_per_pair;
            let caches = &tape.decoder[level];
            let du = pair[1].backward(&caches[1], &dh, &mut g[base + 3..base + 6]);
            dh = pair[0].backward(&caches[0], &du, &mut g[base..base + 3]);
            dskips.push(du);
        }
        if let Some(mask) = &tape.dropout_mask {
            dh *= mask;
        }
        for (level, pair) in self.encoder.iter().enumerate().rev() {
            if level < self.decoder.len() {
                dh += &dskips[level];
            }
            let base = level * units_per_pair;
            let caches = &tape.encoder[level];
            let da = pair[1].backward(&caches[1], &dh, &mut g[base + 3..base + 6]);
            dh = pair[0].backward(&caches[0], &da, &mut g[base..base + 3]);
        }
        Ok(())
    }
}

fn softmax_columns(logits: &Array2<f32>) -> Array2<f64> {
    let (c, n) = logits.dim();
    let mut out = Array2::<f64>::zeros((c, n));
    for v in 0..n {
        let mut max = f64::NEG_INFINITY;
        for k in 0..c {
            max = max.max(logits[[k, v]] as f64);
        }
        let mut total = 0.0;
        for k in 0..c {
            let e = (logits[[k, v]] as f64 - max).exp();
            out[[k, v]] = e;
            total += e;
        }
        for k in 0..c {
            out[[k, v]] /= total;
        }
    }
    out
}

fn probs_to_volume(probs: &Array2<f64>, d: Dims) -> Array4<f64> {
    probs
        .clone()
        .into_shape_with_order((probs.nrows(), d[0], d[1], d[2]))
        .expect("matching voxel count")
}

/// Two identically configured subnets with distinct initializations.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSubnets {
    pub subnet_1: SegNet,
    pub subnet_2: SegNet,
    pub seeds: (u64, u64),
}

pub fn build_dual(config: &SegNetConfig, seed_1: u64, seed_2: u64) -> Result<DualSubnets> {
    if seed_1 == seed_2 {
        return Err(Error::invalid("the two subnets need distinct initialization seeds"));
    }
    Ok(DualSubnets {
        subnet_1: SegNet::new(config.clone(), seed_1)?,
        subnet_2: SegNet::new(config.clone(), seed_2)?,
        seeds: (seed_1, seed_2),
    })
}
