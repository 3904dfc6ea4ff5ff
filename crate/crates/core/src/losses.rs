//! Supervised and unsupervised loss terms with their analytic gradients.
//!
//! Every loss works on a single `(class, x, y, z)` field. Batch helpers average
//! per-sample values, which matches the `1/M` and `1/N` batch factors of the
//! totals.

use ndarray::{Array3, Array4, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::{LabelKind, PseudoLabel, SubnetId};

/// Log clamp for cross entropy.
pub const CE_EPS: f64 = 1e-8;
/// Additive smoothing for soft Dice.
pub const DICE_SMOOTH: f64 = 1e-5;

fn same_shape(pred: &ArrayView4<f64>, target: &ArrayView4<f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    Ok(())
}

fn voxels(a: &ArrayView4<f64>) -> f64 {
    (a.len() / a.len_of(Axis(0))) as f64
}

/// One-hot encoding of a label map into `(classes, x, y, z)`.
pub fn one_hot(labels: &Array3<u8>, classes: usize) -> Array4<f64> {
    let (x, y, z) = labels.dim();
    Array4::from_shape_fn((classes, x, y, z), |(c, i, j, k)| {
        if labels[[i, j, k]] as usize == c {
            1.0
        } else {
            0.0
        }
    })
}

/// Voxel mean of `-sum_c t_c ln(p_c + eps)`.
pub fn cross_entropy(pred: &ArrayView4<f64>, target: &ArrayView4<f64>) -> Result<f64> {
    same_shape(pred, target)?;
    let sum = Zip::from(pred).and(target).fold(
        0.0,
        |acc, &p, &t| {
            if t != 0.0 {
                acc - t * (p + CE_EPS).ln()
            } else {
                acc
            }
        },
    );
    Ok(sum / voxels(pred))
}

pub fn cross_entropy_grad(pred: &ArrayView4<f64>, target: &ArrayView4<f64>) -> Result<Array4<f64>> {
    same_shape(pred, target)?;
    let n = voxels(pred);
    Ok(Zip::from(pred)
        .and(target)
        .map_collect(|&p, &t| -t / ((p + CE_EPS) * n)))
}

struct DiceTerms {
    inter: f64,
    denom: f64,
}

fn dice_terms(pred: &ArrayView4<f64>, target: &ArrayView4<f64>, class: usize) -> DiceTerms {
    let p = pred.index_axis(Axis(0), class);
    let t = target.index_axis(Axis(0), class);
    let inter = Zip::from(&p).and(&t).fold(0.0, |acc, &a, &b| acc + a * b);
    DiceTerms {
        inter,
        denom: p.sum() + t.sum(),
    }
}

/// `1 - (2 I + s) / (P + T + s)` on the foreground channel; with more than two
/// classes, the mean of that quantity over the non-background classes.
pub fn soft_dice_loss(pred: &ArrayView4<f64>, target: &ArrayView4<f64>) -> Result<f64> {
    same_shape(pred, target)?;
    let classes = pred.len_of(Axis(0));
    let total: f64 = (1..classes)
        .map(|c| {
            let d = dice_terms(pred, target, c);
            1.0 - (2.0 * d.inter + DICE_SMOOTH) / (d.denom + DICE_SMOOTH)
        })
        .sum();
    Ok(total / (classes - 1) as f64)
}

pub fn soft_dice_grad(pred: &ArrayView4<f64>, target: &ArrayView4<f64>) -> Result<Array4<f64>> {
    same_shape(pred, target)?;
    let classes = pred.len_of(Axis(0));
    let scale = 1.0 / (classes - 1) as f64;
    let mut grad = Array4::<f64>::zeros(pred.raw_dim());
    for c in 1..classes {
        let d = dice_terms(pred, target, c);
        let num = 2.0 * d.inter + DICE_SMOOTH;
        let den = d.denom + DICE_SMOOTH;
        Zip::from(grad.index_axis_mut(Axis(0), c))
            .and(target.index_axis(Axis(0), c))
            .for_each(|g, &t| *g = -scale * (2.0 * t * den - num) / (den * den));
    }
    Ok(grad)
}

/// Mean over samples of cross entropy plus soft Dice.
pub fn supervised_loss(preds: &[ArrayView4<f64>], targets: &[ArrayView4<f64>]) -> Result<f64> {
    check_batch(preds.len(), targets.len())?;
    let mut sum = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        sum += cross_entropy(p, t)? + soft_dice_loss(p, t)?;
    }
    Ok(sum / preds.len() as f64)
}

pub fn supervised_grad(preds: &[ArrayView4<f64>], targets: &[ArrayView4<f64>]) -> Result<Vec<Array4<f64>>> {
    check_batch(preds.len(), targets.len())?;
    let scale = 1.0 / preds.len() as f64;
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let mut g = cross_entropy_grad(p, t)?;
            g += &soft_dice_grad(p, t)?;
            g *= scale;
            Ok(g)
        })
        .collect()
}

fn check_batch(a: usize, b: usize) -> Result<()> {
    if a == 0 || a != b {
        return Err(Error::shape(format!("batch of {a} predictions vs {b} targets")));
    }
    Ok(())
}

/// Mean over voxels and class channels of the squared difference.
pub fn mse_loss(pred: &ArrayView4<f64>, target: &ArrayView4<f64>) -> Result<f64> {
    same_shape(pred, target)?;
    let sum = Zip::from(pred)
        .and(target)
        .fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t));
    Ok(sum / pred.len() as f64)
}

pub fn mse_grad(pred: &ArrayView4<f64>, target: &ArrayView4<f64>) -> Result<Array4<f64>> {
    same_shape(pred, target)?;
    let n = pred.len() as f64;
    Ok(Zip::from(pred).and(target).map_collect(|&p, &t| 2.0 * (p - t) / n))
}

fn expect_kind(label: &PseudoLabel, kind: LabelKind) -> Result<()> {
    if label.kind != kind {
        return Err(Error::invalid(format!(
            "expected a {kind:?} pseudo-label, got {:?}",
            label.kind
        )));
    }
    Ok(())
}

/// MSE against a fixed pseudo-label.
pub fn fixed_unsup_loss(pred: &ArrayView4<f64>, label: &PseudoLabel) -> Result<f64> {
    expect_kind(label, LabelKind::Fixed)?;
    mse_loss(pred, &label.values.view())
}

/// MSE against a dynamic pseudo-label.
pub fn dynamic_unsup_loss(pred: &ArrayView4<f64>, label: &PseudoLabel) -> Result<f64> {
    expect_kind(label, LabelKind::Dynamic)?;
    mse_loss(pred, &label.values.view())
}

/// Batch mean of an unsupervised term together with the per-sample gradients.
pub fn unsup_batch(
    preds: &[ArrayView4<f64>],
    labels: &[&PseudoLabel],
    kind: LabelKind,
) -> Result<(f64, Vec<Array4<f64>>)> {
    check_batch(preds.len(), labels.len())?;
    let scale = 1.0 / preds.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, l) in preds.iter().zip(labels) {
        expect_kind(l, kind)?;
        value += mse_loss(p, &l.values.view())?;
        grads.push(mse_grad(p, &l.values.view())? * scale);
    }
    Ok((value * scale, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self { alpha, beta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub subnet: SubnetId,
    pub sup: f64,
    pub fix: f64,
    pub dyn_: f64,
    pub total: f64,
}

/// `alpha * sup + fix + beta * dyn`; the fixed term carries weight one.
pub fn total_loss(sup: f64, fix: f64, dyn_: f64, w: LossWeights, subnet: SubnetId) -> Result<LossReport> {
    for (term, v) in [("supervised", sup), ("fixed", fix), ("dynamic", dyn_)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term,
                subnet: subnet.to_string(),
            });
        }
    }
    Ok(LossReport {
        subnet,
        sup,
        fix,
        dyn_,
        total: w.alpha * sup + fix + w.beta * dyn_,
    })
}

/// Gaussian ramp-up `exp(-5 (1 - t/len)^2)`, saturating at 1.
pub fn gaussian_rampup(iteration: usize, length: usize) -> f64 {
    if length == 0 {
        return 1.0;
    }
    let t = (iteration as f64 / length as f64).clamp(0.0, 1.0);
    (-5.0 * (1.0 - t).powi(2)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn binary(fg: &[f64]) -> Array4<f64> {
        let n = fg.len();
        Array4::from_shape_fn((2, n, 1, 1), |(c, i, ..)| if c == 1 { fg[i] } else { 1.0 - fg[i] })
    }

    #[test]
    fn ce_cases() {
        let t = binary(&[1.0, 0.0, 1.0]);
        assert!(cross_entropy(&t.view(), &t.view()).unwrap() < 1e-6);
        let u = binary(&[0.5, 0.5, 0.5]);
        let v = cross_entropy(&u.view(), &t.view()).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-7);
        let wrong = binary(&[0.0, 1.0, 0.0]);
        let big = cross_entropy(&wrong.view(), &t.view()).unwrap();
        assert!(big.is_finite() && big > 18.0);
    }

    #[test]
    fn dice_cases() {
        let t = binary(&[1.0, 0.0]);
        assert!(soft_dice_loss(&t.view(), &t.view()).unwrap() < 1e-6);
        let p = binary(&[0.5, 0.5]);
        assert!((soft_dice_loss(&p.view(), &t.view()).unwrap() - 0.5).abs() < 1e-5);
        let empty = binary(&[0.0, 0.0]);
        assert!(soft_dice_loss(&empty.view(), &empty.view()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn supervised_is_ce_plus_dice_and_batch_mean() {
        let t = binary(&[1.0, 0.0, 1.0, 1.0]);
        let p = binary(&[0.7, 0.2, 0.4, 0.9]);
        let single = supervised_loss(&[p.view()], &[t.view()]).unwrap();
        let direct = cross_entropy(&p.view(), &t.view()).unwrap() + soft_dice_loss(&p.view(), &t.view()).unwrap();
        assert!((single - direct).abs() < 1e-12);
        let twice = supervised_loss(&[p.view(), p.view()], &[t.view(), t.view()]).unwrap();
        assert!((twice - single).abs() < 1e-12);
        assert!(supervised_loss(&[t.view()], &[t.view()]).unwrap() < 1e-6);
    }

    #[test]
    fn mse_cases() {
        let p = binary(&[0.2, 0.8]);
        let t = binary(&[0.4, 0.6]);
        assert!((mse_loss(&p.view(), &t.view()).unwrap() - 0.04).abs() < 1e-12);
        assert_eq!(mse_loss(&p.view(), &p.view()).unwrap(), 0.0);
        let pr = binary(&[0.8, 0.2]);
        let tr = binary(&[0.6, 0.4]);
        assert!((mse_loss(&pr.view(), &tr.view()).unwrap() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn kind_checked_unsup_losses() {
        let p = binary(&[0.2, 0.8]);
        let label = PseudoLabel {
            values: binary(&[0.4, 0.6]),
            kind: LabelKind::Fixed,
            source: SubnetId::Sn2,
            cutmixed: false,
        };
        let f = fixed_unsup_loss(&p.view(), &label).unwrap();
        assert_eq!(f, mse_loss(&p.view(), &label.values.view()).unwrap());
        assert!(dynamic_unsup_loss(&p.view(), &label).is_err());
    }

    #[test]
    fn shape_errors() {
        let a = binary(&[0.2, 0.8]);
        let b = binary(&[0.2]);
        assert!(cross_entropy(&a.view(), &b.view()).is_err());
        assert!(soft_dice_loss(&a.view(), &b.view()).is_err());
        assert!(mse_loss(&a.view(), &b.view()).is_err());
    }

    #[test]
    fn total_assembly() {
        let w = LossWeights::new(0.5, 4.0).unwrap();
        let r = total_loss(1.0, 0.1, 0.05, w, SubnetId::Sn1).unwrap();
        assert!((r.total - 0.8).abs() < 1e-12);
        let w0 = LossWeights::new(0.5, 0.0).unwrap();
        assert_eq!(
            total_loss(1.0, 0.1, 5.0, w0, SubnetId::Sn1).unwrap().total,
            total_loss(1.0, 0.1, 0.0, w0, SubnetId::Sn1).unwrap().total
        );
        let a0 = LossWeights::new(0.0, 4.0).unwrap();
        assert_eq!(
            total_loss(3.0, 0.1, 0.05, a0, SubnetId::Sn2).unwrap().total,
            total_loss(0.0, 0.1, 0.05, a0, SubnetId::Sn2).unwrap().total
        );
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, w, SubnetId::Sn1),
            Err(Error::NonFinite { term: "supervised", .. })
        ));
        assert!(LossWeights::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn multiclass_dice_averages_foreground_classes() {
        let t = Array::from_shape_vec((3, 2, 1, 1), vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(soft_dice_loss(&t.view(), &t.view()).unwrap() < 1e-6);
    }

    #[test]
    fn rampup_bounds() {
        assert!((gaussian_rampup(0, 100) - (-5.0f64).exp()).abs() < 1e-15);
        assert_eq!(gaussian_rampup(100, 100), 1.0);
        assert_eq!(gaussian_rampup(500, 100), 1.0);
    }
}
