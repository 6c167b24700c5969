//! Teacher/student distillation: weight averaging, pseudo-labels from
//! augmented views, perturbation-based sample mining, the two unsupervised
//! losses and their schedules.
//!
//! The formulas here are pure functions. [`branch`] wires them to the
//! segmenter for one unlabeled scene.

pub mod branch;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mask::Mask;
use crate::segmenter::{paste_mask, ClassDistribution, FeaturePyramid, ParameterVector, ProposalBatch};

pub use branch::{
    prepare_unsupervised, unsupervised_loss, StudentViewTarget, UnsupervisedLoss, UnsupervisedTargets,
    UnsupervisedWeights,
};

/// Iteration at which the teacher is created from the student.
pub const TEACHER_INIT_ITER: u64 = 990;
/// First iteration that uses unlabeled data.
pub const WARMUP_ITERS: u64 = 1000;
/// Iteration at which the unsupervised weight reaches 1.
pub const RAMP_UP_END: u64 = 1250;
/// Length of the ramp-down window at the end of training.
pub const RAMP_DOWN_LEN: u64 = 250;
/// Floor applied to predicted probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// `teacher ← α·teacher + (1−α)·student`, elementwise.
pub fn ema_update(teacher: &mut ParameterVector, student: &ParameterVector, alpha: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(Error::Shape("teacher and student layouts differ".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("EMA rate {alpha} is outside [0, 1]")));
    }
    let beta = 1.0 - alpha;
    for (t, &s) in teacher.values_mut().iter_mut().zip(student.values()) {
        *t = alpha * *t + beta * s;
    }
    Ok(())
}

/// EMA rate at iteration `t`: `min(1 − 1/(t − 990), 0.99)`, floored at 0.
pub fn alpha_schedule(t: u64) -> Result<f64> {
    if t <= TEACHER_INIT_ITER {
        return Err(Error::Invalid(format!(
            "EMA rate is undefined before iteration {}",
            TEACHER_INIT_ITER + 1
        )));
    }
    Ok((1.0 - 1.0 / (t - TEACHER_INIT_ITER) as f64).clamp(0.0, 0.99))
}

/// Weight of the unsupervised terms at iteration `t` of `total`.
pub fn lambda_schedule(t: u64, total: u64) -> Result<f64> {
    if total < RAMP_UP_END + RAMP_DOWN_LEN {
        return Err(Error::Config(format!(
            "{total} iterations leave no room between ramp-up and ramp-down (need at least {})",
            RAMP_UP_END + RAMP_DOWN_LEN
        )));
    }
    if t > total {
        return Err(Error::Invalid(format!(
            "iteration {t} is past the end of training ({total})"
        )));
    }
    let lambda = if t < WARMUP_ITERS {
        0.0
    } else if t <= RAMP_UP_END {
        let x = 1.0 - t as f64 / RAMP_UP_END as f64;
        (-125.0 * x * x).exp()
    } else if t >= total - RAMP_DOWN_LEN {
        let x = 1.0 - (total - t) as f64 / RAMP_DOWN_LEN as f64;
        (-12.0 * x * x).exp()
    } else {
        1.0
    };
    Ok(lambda)
}

/// `l_sup + λ(t)·(l_psm + γ·l_mgd)`.
pub fn total_loss(l_sup: f64, l_psm: f64, l_mgd: f64, t: u64, total: u64, gamma: f64) -> Result<f64> {
    if !(l_sup.is_finite() && l_psm.is_finite() && l_mgd.is_finite()) {
        return Err(Error::NonFinite {
            t,
            dump: format!("l_sup={l_sup} l_psm={l_psm} l_mgd={l_mgd}"),
        });
    }
    if !(gamma >= 0.0) {
        return Err(Error::Invalid(format!("gamma {gamma} must be non-negative")));
    }
    let lambda = lambda_schedule(t, total)?;
    if lambda == 0.0 {
        return Ok(l_sup);
    }
    Ok(l_sup + lambda * (l_psm + gamma * l_mgd))
}

/// Mean computed as `p₀ + mean(pₖ − p₀)`, so that identical inputs give back
/// exactly the same value.
fn shifted_mean(values: impl Iterator<Item = f64> + Clone, first: f64, k: usize) -> f64 {
    first + values.map(|v| v - first).sum::<f64>() / k as f64
}

fn check_views(per_view: &[Vec<ClassDistribution>]) -> Result<(usize, usize)> {
    let k = per_view.len();
    if k == 0 {
        return Err(Error::Invalid("no views to ensemble".into()));
    }
    let n = per_view[0].len();
    if per_view.iter().any(|v| v.len() != n) {
        return Err(Error::Shape("views disagree on the number of proposals".into()));
    }
    let c = per_view[0].first().map_or(0, |d| d.len());
    if per_view.iter().flatten().any(|d| d.len() != c) {
        return Err(Error::Shape("distributions disagree on the number of classes".into()));
    }
    Ok((k, n))
}

/// Per-proposal mean of the `K` view distributions. `per_view[k][i]` is view
/// `k`'s prediction for proposal `i`.
pub fn ensemble_pseudo_label(per_view: &[Vec<ClassDistribution>]) -> Result<Vec<ClassDistribution>> {
    let (k, n) = check_views(per_view)?;
    Ok((0..n)
        .map(|i| {
            let first = &per_view[0][i].probs;
            let probs = (0..first.len())
                .map(|c| shifted_mean(per_view.iter().map(|v| v[i].probs[c]), first[c], k))
                .collect();
            ClassDistribution { probs }
        })
        .collect())
}

/// `pᵢ^t / Σⱼ pⱼ^t`.
pub fn sharpen(dist: &ClassDistribution, temperature: f64) -> Result<ClassDistribution> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Invalid(format!("temperature {temperature} must be positive")));
    }
    if temperature == 1.0 {
        return Ok(dist.clone());
    }
    let powered: Vec<f64> = dist.probs.iter().map(|p| p.powf(temperature)).collect();
    let sum: f64 = powered.iter().sum();
    Ok(ClassDistribution {
        probs: powered.into_iter().map(|p| p / sum).collect(),
    })
}

/// Per-proposal sum over classes of the across-view variance.
pub fn perturbation_variance(per_view: &[Vec<ClassDistribution>], mean: &[ClassDistribution]) -> Result<Vec<f64>> {
    let (k, n) = check_views(per_view)?;
    if k < 2 {
        return Err(Error::Invalid("variance needs at least two views".into()));
    }
    if mean.len() != n {
        return Err(Error::Shape(
            "mean and views disagree on the number of proposals".into(),
        ));
    }
    Ok((0..n)
        .map(|i| {
            let m = &mean[i].probs;
            let mut var = 0.0;
            for v in per_view {
                for (p, q) in v[i].probs.iter().zip(m) {
                    var += (p - q) * (p - q);
                }
            }
            var / k as f64
        })
        .collect())
}

/// Teacher pseudo-labels for one scene's proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub mean_dist: Vec<ClassDistribution>,
    pub sharpened_dist: Vec<ClassDistribution>,
    pub hard_label: Vec<usize>,
    pub variance: Vec<f64>,
    pub proposals: ProposalBatch,
}

impl PseudoLabelSet {
    /// Ensembles the views and sharpens the means with `sharpen(·, exponent)`.
    pub fn from_views(per_view: &[Vec<ClassDistribution>], proposals: ProposalBatch, exponent: f64) -> Result<Self> {
        let mean_dist = ensemble_pseudo_label(per_view)?;
        if mean_dist.len() != proposals.len() {
            return Err(Error::Shape("views and proposals disagree in length".into()));
        }
        let variance = perturbation_variance(per_view, &mean_dist)?;
        let sharpened_dist = mean_dist.iter().map(|d| sharpen(d, exponent)).collect::<Result<_>>()?;
        let hard_label = mean_dist.iter().map(ClassDistribution::argmax).collect();
        Ok(PseudoLabelSet {
            mean_dist,
            sharpened_dist,
            hard_label,
            variance,
            proposals,
        })
    }

    pub fn len(&self) -> usize {
        self.hard_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_label.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinedSelection {
    /// Ascending proposal indices.
    pub kept_indices: Vec<usize>,
    pub s_foreground: usize,
}

/// Keeps every foreground proposal and the `s` most perturbation-sensitive
/// background ones, `s` being the foreground count. Variance ties go to the
/// lower index.
pub fn mine_samples(pseudo: &PseudoLabelSet) -> MinedSelection {
    let mut kept: Vec<usize> = (0..pseudo.len()).filter(|&i| pseudo.hard_label[i] != 0).collect();
    let s = kept.len();
    let mut background: Vec<usize> = (0..pseudo.len()).filter(|&i| pseudo.hard_label[i] == 0).collect();
    background.sort_by(|&a, &b| pseudo.variance[b].total_cmp(&pseudo.variance[a]).then(a.cmp(&b)));
    kept.extend(background.into_iter().take(s));
    kept.sort_unstable();
    MinedSelection {
        kept_indices: kept,
        s_foreground: s,
    }
}

/// `−w Σⱼ tⱼ ln max(pⱼ, floor)`.
pub fn weighted_cross_entropy(pred: &ClassDistribution, target: &ClassDistribution, weight: f64) -> f64 {
    -weight
        * pred
            .probs
            .iter()
            .zip(&target.probs)
            .map(|(&p, &t)| if t == 0.0 { 0.0 } else { t * p.max(LOG_FLOOR).ln() })
            .sum::<f64>()
}

/// Gradient of [`weighted_cross_entropy`] with respect to the logits that
/// produced `pred` through a softmax.
pub fn weighted_cross_entropy_logit_grad(
    pred: &ClassDistribution,
    target: &ClassDistribution,
    weight: f64,
) -> Vec<f64> {
    // dL/dp_j, zero where the floor is active
    let g: Vec<f64> = pred
        .probs
        .iter()
        .zip(&target.probs)
        .map(|(&p, &t)| if p > LOG_FLOOR { -weight * t / p } else { 0.0 })
        .collect();
    let pg: f64 = pred.probs.iter().zip(&g).map(|(p, g)| p * g).sum();
    pred.probs.iter().zip(&g).map(|(p, g)| p * (g - pg)).collect()
}

/// Class-weighted cross-entropy against sharpened targets, averaged over the
/// kept proposals of each student view and then over views.
/// `student[l][j]` is view `l`'s prediction for kept proposal `j`; the weight
/// of a proposal is `class_weights[labels[j]]`.
pub fn psm_loss(
    student: &[Vec<ClassDistribution>],
    targets: &[ClassDistribution],
    labels: &[usize],
    class_weights: &[f64],
) -> Result<f64> {
    if student.is_empty() {
        return Err(Error::Invalid("no student views".into()));
    }
    if labels.len() != targets.len() || student.iter().any(|v| v.len() != targets.len()) {
        return Err(Error::Shape(
            "student predictions and targets cover different proposals".into(),
        ));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for view in student {
        let mut sum = 0.0;
        for ((p, t), &c) in view.iter().zip(targets).zip(labels) {
            let w = *class_weights
                .get(c)
                .ok_or_else(|| Error::Invalid(format!("no weight for class {c}")))?;
            sum += weighted_cross_entropy(p, t, w);
        }
        total += sum / targets.len() as f64;
    }
    Ok(total / student.len() as f64)
}

/// Union of thresholded teacher masks pasted into their boxes, at image
/// resolution.
pub fn union_of_masks(masks: &[(BBox, Vec<f64>)], mask_size: usize, height: usize, width: usize) -> Mask {
    let mut out = Mask::empty(height, width);
    for (b, probs) in masks {
        out.union_in_place(&paste_mask(probs, mask_size, b, height, width));
    }
    out
}

/// Max-pools an image mask onto a `height×width` grid of `stride`-sized
/// cells: a cell is set if any pixel it covers is.
pub fn pool_mask(mask: &Mask, stride: usize, height: usize, width: usize) -> Mask {
    let mut out = Mask::empty(height, width);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) && y / stride < height && x / stride < width {
                out.set(y / stride, x / stride, true);
            }
        }
    }
    out
}

/// Per-stage foreground masks: union of the pasted teacher masks, pooled to
/// every stage given as `(height, width, stride)`.
pub fn semantic_mask(
    masks: &[(BBox, Vec<f64>)],
    mask_size: usize,
    height: usize,
    width: usize,
    stages: &[(usize, usize, usize)],
) -> Vec<Mask> {
    let full = union_of_masks(masks, mask_size, height, width);
    stages.iter().map(|&(h, w, s)| pool_mask(&full, s, h, w)).collect()
}

fn check_mgd(teacher: &FeaturePyramid, student: &FeaturePyramid, masks: &[Mask]) -> Result<()> {
    if teacher.stages.len() != student.stages.len() || masks.len() != student.stages.len() {
        return Err(Error::Shape(
            "teacher, student and masks disagree on the stage count".into(),
        ));
    }
    for ((t, s), m) in teacher.stages.iter().zip(&student.stages).zip(masks) {
        if !t.same_shape(s) || m.height() != s.height || m.width() != s.width {
            return Err(Error::Shape("teacher, student and mask stage shapes differ".into()));
        }
    }
    if student.stages.is_empty() {
        return Err(Error::Shape("empty pyramid".into()));
    }
    Ok(())
}

/// Masked squared feature difference. Each stage contributes its masked sum
/// divided by the mask area and by its own channel count; stages are
/// averaged. Stages with an empty mask contribute 0. Unmasked cells are never
/// read.
pub fn mgd_loss(teacher: &FeaturePyramid, student: &FeaturePyramid, masks: &[Mask]) -> Result<f64> {
    Ok(mgd_loss_and_grad(teacher, student, masks, false)?.0)
}

/// [`mgd_loss`] together with its gradient with respect to the student
/// features when `with_grad` is set.
pub fn mgd_loss_and_grad(
    teacher: &FeaturePyramid,
    student: &FeaturePyramid,
    masks: &[Mask],
    with_grad: bool,
) -> Result<(f64, Option<FeaturePyramid>)> {
    check_mgd(teacher, student, masks)?;
    let n_stages = student.stages.len() as f64;
    let mut grad = with_grad.then(|| student.zeros_like());
    let mut total = 0.0;
    for (t, ((zt, zs), m)) in teacher.stages.iter().zip(&student.stages).zip(masks).enumerate() {
        let area = m.area();
        if area == 0 {
            continue;
        }
        let norm = n_stages * zs.channels as f64 * area as f64;
        let plane = zs.height * zs.width;
        let mut sum = 0.0;
        for (cell, _) in m.as_slice().iter().enumerate().filter(|(_, &on)| on) {
            for c in 0..zs.channels {
                let d = zs.data[c * plane + cell] - zt.data[c * plane + cell];
                sum += d * d;
                if let Some(g) = grad.as_mut() {
                    g.stages[t].data[c * plane + cell] = 2.0 * d / norm;
                }
            }
        }
        total += sum / norm;
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests;
