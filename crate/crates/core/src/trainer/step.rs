use ndarray::{Array3, Array4, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{poly_lr, TrainConfig};
use crate::data::{sample_training_batch, CropSampler, DatasetSplit, TrainingBatch};
use crate::error::{Error, Result};
use crate::losses::{gaussian_rampup, one_hot, supervised_grad, supervised_loss, total_loss, unsup_batch, LossReport};
use crate::mixing::{apply_cutmix_labels, apply_cutmix_pair, sample_mask};
use crate::network::{build_dual, DualSubnets, Gradients, SegNet, Sgd, Tape};
use crate::pseudolabel::{make_dynamic_pseudo_label, sharpen, LabelKind, ProbabilityVolume, PseudoLabel, SubnetId};
use crate::volgeom::{
    overlap_in_fixed_frame, select_available_crop, select_dynamic_crop, CropBox, OverlapMap, ShiftDirection,
};

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub nets: DualSubnets,
    pub opt_1: Sgd,
    pub opt_2: Sgd,
    pub sampler: CropSampler,
    pub rng: ChaCha8Rng,
    /// Number of completed steps.
    pub iteration: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let nets = build_dual(&config.network, config.seeds.model_1, config.seeds.model_2)?;
        let (mu, wd) = (config.momentum as f32, config.weight_decay as f32);
        Ok(Self {
            opt_1: Sgd::new(&nets.subnet_1, mu, wd),
            opt_2: Sgd::new(&nets.subnet_2, mu, wd),
            nets,
            sampler: CropSampler::new(config.network.crop_size, config.sigma, config.seeds.sampler)?
                .with_labeled_margin(config.labeled_margin)
                .with_unlabeled_margin(config.unlabeled_margin),
            rng: ChaCha8Rng::seed_from_u64(config.seeds.loop_),
            iteration: 0,
            config: config.clone(),
        })
    }

    /// Samples a batch and runs one step on it.
    pub fn step(&mut self, split: &DatasetSplit) -> Result<StepOutcome> {
        let batch = sample_training_batch(split, &mut self.sampler)?;
        train_step(self, &batch)
    }
}

/// Provenance of one unsupervised target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetTag {
    pub kind: LabelKind,
    pub source: SubnetId,
    pub cutmixed: bool,
}

impl From<&PseudoLabel> for TargetTag {
    fn from(l: &PseudoLabel) -> Self {
        Self {
            kind: l.kind,
            source: l.source,
            cutmixed: l.cutmixed,
        }
    }
}

/// What happened inside a step, for auditing the co-training contract.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepAudit {
    pub sn1_targets: Vec<TargetTag>,
    pub sn2_targets: Vec<TargetTag>,
    /// One patch per unlabeled pair when CutMix is on.
    pub cutmix_patches: Vec<CropBox>,
    /// Chosen shift per unlabeled crop; `None` in identity-shift mode.
    pub shifts: Vec<Option<ShiftDirection>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// 1-based index of the step just taken.
    pub iteration: usize,
    pub lr: f64,
    pub sn1: LossReport,
    pub sn2: LossReport,
    pub audit: StepAudit,
}

fn as4(a: &Array3<f32>) -> ArrayView4<'_, f32> {
    a.view().insert_axis(Axis(0))
}

fn train_forward(net: &SegNet, images: &[&Array3<f32>], rng: &mut ChaCha8Rng) -> Result<Vec<(Array4<f64>, Tape)>> {
    images.iter().map(|img| net.forward_train(&as4(img), rng)).collect()
}

fn label_from(net: &SegNet, id: SubnetId, image: &Array3<f32>, t: f64, kind: LabelKind) -> Result<PseudoLabel> {
    sharpen(&net.predict(image, id)?, t, kind)
}

/// Fixed labels, plus dynamic labels when requested.
fn pseudo_labels(
    net: &SegNet,
    id: SubnetId,
    fixed_probs: Option<&[Array4<f64>]>,
    fixed_images: &[&Array3<f32>],
    dynamic: &[(Array3<f32>, OverlapMap)],
    t: f64,
) -> Result<(Vec<PseudoLabel>, Vec<PseudoLabel>)> {
    let fixed = match fixed_probs {
        Some(probs) => probs
            .iter()
            .map(|p| {
                sharpen(
                    &ProbabilityVolume::new_unchecked(p.clone(), id, None),
                    t,
                    LabelKind::Fixed,
                )
            })
            .collect::<Result<Vec<_>>>()?,
        None => fixed_images
            .iter()
            .map(|img| label_from(net, id, img, t, LabelKind::Fixed))
            .collect::<Result<Vec<_>>>()?,
    };
    let dyn_ = dynamic
        .iter()
        .zip(&fixed)
        .map(|((img, overlap), f)| {
            let temp = label_from(net, id, img, t, LabelKind::Temporary)?;
            make_dynamic_pseudo_label(f, &temp, overlap)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((fixed, dyn_))
}

/// Unsupervised value and per-sample gradients for one term, or zeros when disabled.
fn unsup_term(
    enabled: bool,
    preds: &[ArrayView4<f64>],
    labels: &[PseudoLabel],
    kind: LabelKind,
) -> Result<(f64, Option<Vec<Array4<f64>>>)> {
    if !enabled {
        return Ok((0.0, None));
    }
    let refs: Vec<&PseudoLabel> = labels.iter().collect();
    let (v, g) = unsup_batch(preds, &refs, kind)?;
    Ok((v, Some(g)))
}

fn backward_all(net: &SegNet, tapes: &[Tape], dprobs: &[Array4<f64>], grads: &mut Gradients) -> Result<()> {
    for (tape, d) in tapes.iter().zip(dprobs) {
        net.backward(tape, &d.view(), grads)?;
    }
    Ok(())
}

/// Combines per-term gradients `fix_w * g_fix + dyn_w * g_dyn` sample by sample.
fn combine(
    n: usize,
    fix: Option<Vec<Array4<f64>>>,
    fix_w: f64,
    dyn_: Option<Vec<Array4<f64>>>,
    dyn_w: f64,
) -> Option<Vec<Array4<f64>>> {
    let scale = |v: Vec<Array4<f64>>, w: f64| v.into_iter().map(|g| g * w).collect::<Vec<_>>();
    match (fix, dyn_) {
        (None, None) => None,
        (Some(f), None) => Some(scale(f, fix_w)),
        (None, Some(d)) => Some(scale(d, dyn_w)),
        (Some(f), Some(d)) => {
            debug_assert_eq!(f.len(), n);
            Some(f.into_iter().zip(d).map(|(a, b)| a * fix_w + b * dyn_w).collect())
        }
    }
}

/// One co-training iteration on `batch`. All pseudo-labels come from the
/// weights as they were before this step; each subnet then steps on its own total.
pub fn train_step(state: &mut TrainState, batch: &TrainingBatch) -> Result<StepOutcome> {
    let cfg = state.config.clone();
    let weights = cfg.weights()?;
    let lr = poly_lr(state.iteration, &cfg)?;
    let ramp = if cfg.rampup_iterations > 0 {
        gaussian_rampup(state.iteration, cfg.rampup_iterations)
    } else {
        1.0
    };
    let classes = cfg.network.num_classes;
    let t = cfg.temperature;
    let reuse_train_probs = cfg.network.dropout == 0.0;
    let rng = &mut state.rng;
    let (sn1, sn2) = (&state.nets.subnet_1, &state.nets.subnet_2);
    let mut g1 = sn1.zero_grads();
    let mut g2 = sn2.zero_grads();
    let mut audit = StepAudit::default();

    // Supervised part on labeled crops, both subnets in train mode.
    let labeled_images: Vec<&Array3<f32>> = batch.labeled.iter().map(|l| &l.image).collect();
    let targets: Vec<Array4<f64>> = batch.labeled.iter().map(|l| one_hot(&l.mask, classes)).collect();
    let target_views: Vec<_> = targets.iter().map(|t| t.view()).collect();
    let mut sup = [0.0; 2];
    for (k, (net, grads)) in [(sn1, &mut g1), (sn2, &mut g2)].into_iter().enumerate() {
        let out = train_forward(net, &labeled_images, rng)?;
        let preds: Vec<_> = out.iter().map(|(p, _)| p.view()).collect();
        sup[k] = supervised_loss(&preds, &target_views)?;
        let dprobs: Vec<_> = supervised_grad(&preds, &target_views)?
            .into_iter()
            .map(|g| g * weights.alpha)
            .collect();
        let tapes: Vec<Tape> = out.into_iter().map(|(_, tape)| tape).collect();
        backward_all(net, &tapes, &dprobs, grads)?;
    }

    let mut fix = [0.0; 2];
    let mut dyn_ = [0.0; 2];
    if !cfg.supervised_only() {
        let unl = &batch.unlabeled;
        if unl.is_empty() || !unl.len().is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "need an even, non-zero number of unlabeled crops, got {}",
                unl.len()
            )));
        }
        let crop = cfg.network.crop_size;
        let fixed_images: Vec<&Array3<f32>> = unl.iter().map(|u| &u.image).collect();

        // Dynamic crop per unlabeled sample, drawn independently.
        let dynamic: Vec<(Array3<f32>, OverlapMap)> = if cfg.use_dyn {
            unl.iter()
                .map(|u| {
                    if cfg.identity_shift {
                        audit.shifts.push(None);
                        return Ok((u.image.clone(), OverlapMap::identity(crop)));
                    }
                    let boxes = u.candidates.iter().map(|(d, (b, _))| (*d, *b)).collect();
                    let (dir, bbox) = if cfg.unlabeled_margin {
                        select_dynamic_crop(&boxes, rng)?
                    } else {
                        select_available_crop(&boxes, rng)?
                    };
                    audit.shifts.push(Some(dir));
                    Ok((u.candidates[&dir].1.clone(), overlap_in_fixed_frame(&u.fixed, &bbox)?))
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        // SN1 learns from SN2 on the original crops.
        let out1 = train_forward(sn1, &fixed_images, rng)?;
        let (pl2_fix, pl2_dyn) = pseudo_labels(sn2, SubnetId::Sn2, None, &fixed_images, &dynamic, t)?;
        let preds1: Vec<_> = out1.iter().map(|(p, _)| p.view()).collect();
        let (f1, gf1) = unsup_term(cfg.use_fix, &preds1, &pl2_fix, LabelKind::Fixed)?;
        let (d1, gd1) = unsup_term(cfg.use_dyn, &preds1, &pl2_dyn, LabelKind::Dynamic)?;
        if cfg.use_fix {
            audit.sn1_targets.extend(pl2_fix.iter().map(TargetTag::from));
        }
        if cfg.use_dyn {
            audit.sn1_targets.extend(pl2_dyn.iter().map(TargetTag::from));
        }
        fix[0] = f1;
        dyn_[0] = d1;

        // SN2 learns from SN1, on CutMix images with identically mixed targets.
        let sn1_fixed_probs: Option<Vec<Array4<f64>>> =
            reuse_train_probs.then(|| out1.iter().map(|(p, _)| p.clone()).collect());
        let (mut pl1_fix, mut pl1_dyn) = pseudo_labels(
            sn1,
            SubnetId::Sn1,
            sn1_fixed_probs.as_deref(),
            &fixed_images,
            &dynamic,
            t,
        )?;
        let mut sn2_images: Vec<Array3<f32>> = fixed_images.iter().map(|&i| i.clone()).collect();
        if cfg.use_cutmix {
            for p in (0..unl.len()).step_by(2) {
                let mask = sample_mask(crop, cfg.cutmix_ratio, rng)?;
                let (a, b) = apply_cutmix_pair(&unl[p].image.view(), &unl[p + 1].image.view(), &mask)?;
                sn2_images[p] = a;
                sn2_images[p + 1] = b;
                let (a, b) = apply_cutmix_labels(&pl1_fix[p], &pl1_fix[p + 1], &mask)?;
                pl1_fix[p] = a;
                pl1_fix[p + 1] = b;
                if cfg.use_dyn {
                    let (a, b) = apply_cutmix_labels(&pl1_dyn[p], &pl1_dyn[p + 1], &mask)?;
                    pl1_dyn[p] = a;
                    pl1_dyn[p + 1] = b;
                }
                audit.cutmix_patches.push(mask.patch);
            }
        }
        let sn2_refs: Vec<&Array3<f32>> = sn2_images.iter().collect();
        let out2 = train_forward(sn2, &sn2_refs, rng)?;
        let preds2: Vec<_> = out2.iter().map(|(p, _)| p.view()).collect();
        let (f2, gf2) = unsup_term(cfg.use_fix, &preds2, &pl1_fix, LabelKind::Fixed)?;
        let (d2, gd2) = unsup_term(cfg.use_dyn, &preds2, &pl1_dyn, LabelKind::Dynamic)?;
        if cfg.use_fix {
            audit.sn2_targets.extend(pl1_fix.iter().map(TargetTag::from));
        }
        if cfg.use_dyn {
            audit.sn2_targets.extend(pl1_dyn.iter().map(TargetTag::from));
        }
        fix[1] = f2;
        dyn_[1] = d2;

        // Check totals before touching any gradient buffers.
        total_loss(sup[0], ramp * f1, ramp * d1, weights, SubnetId::Sn1)?;
        total_loss(sup[1], ramp * f2, ramp * d2, weights, SubnetId::Sn2)?;

        let n = unl.len();
        if let Some(d) = combine(n, gf1, ramp, gd1, ramp * weights.beta) {
            let tapes: Vec<Tape> = out1.into_iter().map(|(_, tape)| tape).collect();
            backward_all(sn1, &tapes, &d, &mut g1)?;
        }
        if let Some(d) = combine(n, gf2, ramp, gd2, ramp * weights.beta) {
            let tapes: Vec<Tape> = out2.into_iter().map(|(_, tape)| tape).collect();
            backward_all(sn2, &tapes, &d, &mut g2)?;
        }
    }

    let r1 = total_loss(sup[0], ramp * fix[0], ramp * dyn_[0], weights, SubnetId::Sn1)?;
    let r2 = total_loss(sup[1], ramp * fix[1], ramp * dyn_[1], weights, SubnetId::Sn2)?;
    state.opt_1.step(&mut state.nets.subnet_1, &g1, lr as f32)?;
    state.opt_2.step(&mut state.nets.subnet_2, &g2, lr as f32)?;
    state.iteration += 1;
    Ok(StepOutcome {
        iteration: state.iteration,
        lr,
        sn1: r1,
        sn2: r2,
        audit,
    })
}
