//! Dice + cross-entropy supervision, pseudo-labels, the cross pseudo
//! supervision term and the lambda ramp.
//!
//! Every loss comes in two flavours: a value-only function and a `*_grad`
//! variant returning the gradient with respect to the predicted
//! probabilities, which the network backpropagates.

use serde::{Deserialize, Serialize};

use crate::data::{num_voxels, Dims};
use crate::error::{Error, Result};
use crate::network::ConfidenceMap;

/// Smoothing term of the soft dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Hard class map derived from a prediction; used as a constant target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelMap {
    pub dims: Dims,
    pub num_classes: usize,
    pub labels: Vec<u8>,
}

/// Argmax per voxel, ties to the lowest class index.
pub fn make_pseudo_label(conf: &ConfidenceMap) -> PseudoLabelMap {
    PseudoLabelMap {
        dims: conf.dims,
        num_classes: conf.num_classes,
        labels: conf.argmax(),
    }
}

fn check_target(pred: &ConfidenceMap, target: &[u8]) -> Result<()> {
    if target.len() != pred.voxels() {
        return Err(Error::ShapeMismatch(format!(
            "target has {} voxels, prediction {:?} has {}",
            target.len(),
            pred.dims,
            pred.voxels()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= pred.num_classes) {
        return Err(Error::InvalidTarget(format!(
            "label {bad} outside [0, {})",
            pred.num_classes
        )));
    }
    Ok(())
}

fn dice_terms(pred: &ConfidenceMap, target: &[u8], grad: Option<&mut [f64]>) -> f64 {
    let n = pred.voxels();
    let classes = pred.num_classes;
    let fg = (classes - 1) as f64;
    let mut loss = 1.0;
    let mut grad = grad;
    for c in 1..classes {
        let p = &pred.probs[c * n..(c + 1) * n];
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut tsum = 0.0;
        for (v, &pv) in p.iter().enumerate() {
            psum += pv;
            if target[v] as usize == c {
                inter += pv;
                tsum += 1.0;
            }
        }
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = psum + tsum + DICE_SMOOTH;
        loss -= num / den / fg;
        if let Some(g) = grad.as_deref_mut() {
            let g = &mut g[c * n..(c + 1) * n];
            let den2 = den * den;
            for (v, gv) in g.iter_mut().enumerate() {
                let t = if target[v] as usize == c { 2.0 } else { 0.0 };
                *gv -= (t * den - num) / den2 / fg;
            }
        }
    }
    loss
}

fn ce_terms(pred: &ConfidenceMap, target: &[u8], grad: Option<&mut [f64]>) -> f64 {
    let n = pred.voxels();
    let nf = n as f64;
    let mut sum = 0.0;
    let mut grad = grad;
    for (v, &t) in target.iter().enumerate() {
        let idx = t as usize * n + v;
        let p = pred.probs[idx];
        sum -= p.max(PROB_FLOOR).ln();
        if let Some(g) = grad.as_deref_mut() {
            if p > PROB_FLOOR {
                g[idx] -= 1.0 / (nf * p);
            }
        }
    }
    sum / nf
}

/// Soft dice loss over the foreground classes.
pub fn soft_dice_loss(pred: &ConfidenceMap, target: &[u8]) -> Result<f64> {
    check_target(pred, target)?;
    Ok(dice_terms(pred, target, None))
}

/// Mean voxel-wise cross-entropy with the probability floor.
pub fn cross_entropy(pred: &ConfidenceMap, target: &[u8]) -> Result<f64> {
    check_target(pred, target)?;
    Ok(ce_terms(pred, target, None))
}

/// Soft dice loss plus cross-entropy for one sample.
pub fn dice_ce(pred: &ConfidenceMap, target: &[u8]) -> Result<f64> {
    check_target(pred, target)?;
    Ok(dice_terms(pred, target, None) + ce_terms(pred, target, None))
}

/// [`dice_ce`] together with its gradient w.r.t. `pred.probs`.
pub fn dice_ce_grad(pred: &ConfidenceMap, target: &[u8]) -> Result<(f64, Vec<f64>)> {
    check_target(pred, target)?;
    let mut grad = vec![0.0; pred.probs.len()];
    let value = dice_terms(pred, target, Some(&mut grad)) + ce_terms(pred, target, Some(&mut grad));
    Ok((value, grad))
}

/// Deep-supervision weights `2^-i`, normalized to sum to one.
pub fn ds_weights(heads: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..heads).map(|i| 0.5f64.powi(i as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Nearest downsampling by integer strides: output voxel `i` takes input
/// voxel `i * stride` on every axis.
pub fn downsample_labels(labels: &[u8], dims: Dims, out: Dims) -> Result<Vec<u8>> {
    if labels.len() != num_voxels(dims) {
        return Err(Error::ShapeMismatch("label buffer does not match dims".into()));
    }
    if out == dims {
        return Ok(labels.to_vec());
    }
    let mut stride = [0; 3];
    for a in 0..3 {
        if out[a] == 0 || !dims[a].is_multiple_of(out[a]) {
            return Err(Error::ShapeMismatch(format!(
                "cannot downsample {dims:?} to {out:?}"
            )));
        }
        stride[a] = dims[a] / out[a];
    }
    let mut res = Vec::with_capacity(num_voxels(out));
    for z in 0..out[0] {
        for y in 0..out[1] {
            for x in 0..out[2] {
                let (sz, sy, sx) = (z * stride[0], y * stride[1], x * stride[2]);
                res.push(labels[(sz * dims[1] + sy) * dims[2] + sx]);
            }
        }
    }
    Ok(res)
}

/// Deep-supervised dice + CE of one network's head outputs (finest first)
/// against a full-resolution target, plus per-head probability gradients.
pub fn ds_dice_ce_grad(outputs: &[ConfidenceMap], target: &[u8]) -> Result<(f64, Vec<Vec<f64>>)> {
    let Some(finest) = outputs.first() else {
        return Ok((0.0, Vec::new()));
    };
    let weights = ds_weights(outputs.len());
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    for (out, w) in outputs.iter().zip(&weights) {
        let t = downsample_labels(target, finest.dims, out.dims)?;
        let (v, mut g) = dice_ce_grad(out, &t)?;
        g.iter_mut().for_each(|x| *x *= w);
        total += w * v;
        grads.push(g);
    }
    Ok((total, grads))
}

pub fn ds_dice_ce(outputs: &[ConfidenceMap], target: &[u8]) -> Result<f64> {
    let Some(finest) = outputs.first() else {
        return Ok(0.0);
    };
    let weights = ds_weights(outputs.len());
    let mut total = 0.0;
    for (out, w) in outputs.iter().zip(&weights) {
        let t = downsample_labels(target, finest.dims, out.dims)?;
        total += w * dice_ce(out, &t)?;
    }
    Ok(total)
}

/// Supervised term for one labeled sample: both networks against ground truth.
pub fn sup_loss(out1: &[ConfidenceMap], out2: &[ConfidenceMap], gt: Option<&[u8]>) -> Result<f64> {
    let gt = gt.ok_or(Error::MissingGroundTruth)?;
    Ok(ds_dice_ce(out1, gt)? + ds_dice_ce(out2, gt)?)
}

/// Cross pseudo supervision term for one sample: each network is trained
/// toward the other's finest-level argmax.
pub fn cps_loss(out1: &[ConfidenceMap], out2: &[ConfidenceMap]) -> Result<f64> {
    let (Some(f1), Some(f2)) = (out1.first(), out2.first()) else {
        return Ok(0.0);
    };
    let y1 = make_pseudo_label(f1);
    let y2 = make_pseudo_label(f2);
    Ok(ds_dice_ce(out1, &y2.labels)? + ds_dice_ce(out2, &y1.labels)?)
}

/// Linear ramp of the CPS weight from 0 to `lambda_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub lambda_max: f64,
    pub ramp_end_epoch: usize,
}

impl LambdaSchedule {
    pub const DEFAULT_MAX: f64 = 0.5;

    /// Ramp ending halfway through training.
    pub fn for_epochs(total_epochs: usize) -> Self {
        Self {
            lambda_max: Self::DEFAULT_MAX,
            ramp_end_epoch: (total_epochs / 2).max(1),
        }
    }

    pub fn value(&self, epoch: usize) -> f64 {
        let frac = (epoch as f64 / self.ramp_end_epoch.max(1) as f64).min(1.0);
        self.lambda_max * frac
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_max.is_finite() && self.lambda_max >= 0.0) || self.ramp_end_epoch == 0 {
            return Err(Error::Config(format!(
                "lambda schedule needs lambda_max >= 0 and ramp_end_epoch >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sup: f64,
    pub l_cps_labeled: f64,
    pub l_cps_unlabeled: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_loss(sup: f64, cps_l: f64, cps_u: f64, epoch: usize, sched: &LambdaSchedule) -> LossReport {
    let lambda = sched.value(epoch);
    LossReport {
        l_sup: sup,
        l_cps_labeled: cps_l,
        l_cps_unlabeled: cps_u,
        lambda,
        total: with_lambda(sup, cps_l, cps_u, lambda),
    }
}

/// `sup + lambda * (cps_l + cps_u)`, returning `sup` untouched when lambda is 0.
pub fn with_lambda(sup: f64, cps_l: f64, cps_u: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        sup
    } else {
        sup + lambda * (cps_l + cps_u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(classes: usize, dims: Dims, probs: Vec<f64>) -> ConfidenceMap {
        ConfidenceMap::new(classes, dims, probs)
    }

    fn uniform(classes: usize, dims: Dims) -> ConfidenceMap {
        let n = num_voxels(dims);
        map(classes, dims, vec![1.0 / classes as f64; classes * n])
    }

    #[test]
    fn perfect_prediction() {
        let target = vec![0, 1, 2, 2, 1, 0, 0, 2];
        let pred = ConfidenceMap::one_hot(&target, 3, [2, 2, 2]);
        let loss = dice_ce(&pred, &target).unwrap();
        assert!((0.0..1e-4).contains(&loss), "{loss}");
        assert_eq!(cross_entropy(&pred, &target).unwrap(), 0.0);
    }

    #[test]
    fn uniform_ce_is_log_classes() {
        for c in 2..6 {
            let target: Vec<u8> = (0..27).map(|i| (i % c) as u8).collect();
            let ce = cross_entropy(&uniform(c, [3, 3, 3]), &target).unwrap();
            assert!((ce - (c as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn binary_toy_dice() {
        // Ten voxels in a row; target foreground at 0..4, prediction at 2..6.
        let target: Vec<u8> = (0..10).map(|i| (i < 4) as u8).collect();
        let hard: Vec<u8> = (0..10).map(|i| (2..6).contains(&i) as u8).collect();
        let pred = ConfidenceMap::one_hot(&hard, 2, [1, 1, 10]);
        let d = soft_dice_loss(&pred, &target).unwrap();
        let eps = 1e-5;
        assert!((d - (1.0 - (4.0 + eps) / (8.0 + eps))).abs() < 1e-15);
        assert!((d - 0.5).abs() < 1e-6);
    }

    #[test]
    fn invalid_targets() {
        let pred = uniform(2, [1, 1, 4]);
        assert!(matches!(dice_ce(&pred, &[0, 1, 2, 0]), Err(Error::InvalidTarget(_))));
        assert!(matches!(dice_ce(&pred, &[0, 1, 0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn pseudo_label_examples() {
        let m = map(3, [1, 1, 1], vec![0.1, 0.7, 0.2]);
        assert_eq!(make_pseudo_label(&m).labels, vec![1]);
        let tie = map(2, [1, 1, 1], vec![0.5, 0.5]);
        assert_eq!(make_pseudo_label(&tie).labels, vec![0]);
        let labels = vec![2, 0, 1, 1, 2, 0, 0, 0];
        let oh = ConfidenceMap::one_hot(&labels, 3, [2, 2, 2]);
        assert_eq!(make_pseudo_label(&oh).labels, labels);
    }

    #[test]
    fn ds_weights_halve_and_normalize() {
        assert_eq!(ds_weights(1), vec![1.0]);
        let w = ds_weights(3);
        assert!((w[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((w[1] - 2.0 / 7.0).abs() < 1e-15);
        assert!((w[2] - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn downsample_picks_strided_voxels() {
        let labels: Vec<u8> = (0..64).map(|i| i as u8).collect();
        let d = downsample_labels(&labels, [4, 4, 4], [2, 2, 2]).unwrap();
        assert_eq!(d, vec![0, 2, 8, 10, 32, 34, 40, 42]);
        assert!(downsample_labels(&labels, [4, 4, 4], [3, 2, 2]).is_err());
    }

    #[test]
    fn sup_loss_examples() {
        let gt = vec![0, 1, 1, 0, 2, 2, 0, 1];
        let out = vec![uniform(3, [2, 2, 2])];
        let single = dice_ce(&out[0], &gt).unwrap();
        let both = sup_loss(&out, &out, Some(&gt)).unwrap();
        assert_eq!(both, 2.0 * single);
        assert!(matches!(sup_loss(&out, &out, None), Err(Error::MissingGroundTruth)));
        let perfect = vec![ConfidenceMap::one_hot(&gt, 3, [2, 2, 2])];
        assert!(sup_loss(&perfect, &perfect, Some(&gt)).unwrap() < 1e-4);
    }

    #[test]
    fn cps_loss_examples() {
        let labels = vec![0, 1, 1, 0, 1, 0, 0, 1];
        let oh = vec![ConfidenceMap::one_hot(&labels, 2, [2, 2, 2])];
        assert!(cps_loss(&oh, &oh).unwrap() < 1e-4);

        // Network 1 says class 1 everywhere, network 2 says class 0.
        let n = 8;
        let all1 = vec![ConfidenceMap::one_hot(&vec![1; n], 2, [2, 2, 2])];
        let all0 = vec![ConfidenceMap::one_hot(&vec![0; n], 2, [2, 2, 2])];
        let v = cps_loss(&all1, &all0).unwrap();
        // Net 1 against all-zero target: dice = 1 - eps/(n + eps), CE = -ln(1e-12).
        // Net 2 against all-one target: dice = 1 - eps/(n + eps), same CE.
        let eps = 1e-5;
        let dice = 1.0 - eps / (n as f64 + eps);
        let ce = -(1e-12f64).ln();
        let oracle = 2.0 * (dice + ce);
        assert!((v - oracle).abs() < 1e-12, "{v} vs {oracle}");
        assert_eq!(v, cps_loss(&all0, &all1).unwrap());
    }

    #[test]
    fn lambda_schedule_points() {
        let s = LambdaSchedule {
            lambda_max: 0.5,
            ramp_end_epoch: 20,
        };
        assert_eq!(s.value(0), 0.0);
        assert_eq!(s.value(20), 0.5);
        assert_eq!(s.value(10), 0.25);
        assert_eq!(s.value(100), 0.5);
        assert_eq!(LambdaSchedule::for_epochs(40), s);
        let r = total_loss(1.25, 3.0, 4.0, 0, &s);
        assert_eq!(r.total, 1.25);
        let r = total_loss(1.25, 3.0, 4.0, 10, &s);
        assert_eq!(r.total, 1.25 + 0.25 * 7.0);
    }

    fn random_map(classes: usize, dims: Dims, raw: &[f64]) -> ConfidenceMap {
        let n = num_voxels(dims);
        let mut probs = vec![0.0; classes * n];
        for v in 0..n {
            let s: f64 = (0..classes).map(|c| raw[c * n + v]).sum();
            for c in 0..classes {
                probs[c * n + v] = raw[c * n + v] / s;
            }
        }
        map(classes, dims, probs)
    }

    proptest! {
        #[test]
        fn dice_ce_gradient_matches_central_differences(
            raw in proptest::collection::vec(0.05f64..1.0, 3 * 8),
            target in proptest::collection::vec(0u8..3, 8),
        ) {
            let pred = random_map(3, [2, 2, 2], &raw);
            let (v, g) = dice_ce_grad(&pred, &target).unwrap();
            prop_assert!((v - dice_ce(&pred, &target).unwrap()).abs() < 1e-15);
            let h = 1e-6;
            for i in 0..pred.probs.len() {
                let mut a = pred.clone();
                let mut b = pred.clone();
                a.probs[i] += h;
                b.probs[i] -= h;
                let fd = (dice_ce(&a, &target).unwrap() - dice_ce(&b, &target).unwrap()) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "{} vs {}", fd, g[i]);
            }
        }

        #[test]
        fn dice_ce_nonnegative(
            raw in proptest::collection::vec(0.01f64..1.0, 2 * 8),
            target in proptest::collection::vec(0u8..2, 8),
        ) {
            let pred = random_map(2, [2, 2, 2], &raw);
            prop_assert!(dice_ce(&pred, &target).unwrap() >= 0.0);
        }

        #[test]
        fn swap_symmetry(
            a in proptest::collection::vec(0.05f64..1.0, 3 * 8),
            b in proptest::collection::vec(0.05f64..1.0, 3 * 8),
            gt in proptest::collection::vec(0u8..3, 8),
        ) {
            let o1 = vec![random_map(3, [2, 2, 2], &a)];
            let o2 = vec![random_map(3, [2, 2, 2], &b)];
            prop_assert_eq!(sup_loss(&o1, &o2, Some(&gt)).unwrap(), sup_loss(&o2, &o1, Some(&gt)).unwrap());
            prop_assert_eq!(cps_loss(&o1, &o2).unwrap(), cps_loss(&o2, &o1).unwrap());
        }

        #[test]
        fn pseudo_labels_idempotent(labels in proptest::collection::vec(0u8..4, 27)) {
            let oh = ConfidenceMap::one_hot(&labels, 4, [3, 3, 3]);
            let y = make_pseudo_label(&oh);
            let again = make_pseudo_label(&ConfidenceMap::one_hot(&y.labels, 4, [3, 3, 3]));
            prop_assert_eq!(y, again);
        }

        #[test]
        fn lambda_monotone_and_saturating(ramp in 1usize..100, e in 0usize..300) {
            let s = LambdaSchedule { lambda_max: 0.5, ramp_end_epoch: ramp };
            prop_assert!(s.value(e) <= s.value(e + 1));
            prop_assert!(s.value(e) <= 0.5);
            if e >= ramp {
                prop_assert_eq!(s.value(e), 0.5);
            }
        }

        #[test]
        fn report_total_identity(sup in 0.0f64..10.0, l in 0.0f64..10.0, u in 0.0f64..10.0, e in 0usize..50) {
            let r = total_loss(sup, l, u, e, &LambdaSchedule::for_epochs(40));
            prop_assert!((r.total - (r.l_sup + r.lambda * (r.l_cps_labeled + r.l_cps_unlabeled))).abs() < 1e-9);
        }
    }
}
