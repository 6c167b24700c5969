use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{axpy, dot, ParameterVector, Segmenter, NUM_CLASSES};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Categorical distribution over classes, index 0 being background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub probs: Vec<f64>,
}

impl ClassDistribution {
    /// Validates non-negativity and unit sum (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Invalid(format!("not a distribution: {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("probabilities sum to {sum}")));
        }
        Ok(ClassDistribution { probs })
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        ClassDistribution { probs: softmax(logits) }
    }

    pub fn uniform(classes: usize) -> Self {
        ClassDistribution {
            probs: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn one_hot(classes: usize, class: usize) -> Self {
        let mut probs = vec![0.0; classes];
        probs[class] = 1.0;
        ClassDistribution { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability, ties to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Everything the heads produce for one patch, plus the hidden activation
/// needed for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub hidden: Vec<f64>,
    pub cls_logits: [f64; NUM_CLASSES],
    pub box_delta: [f64; 4],
    /// Empty unless the mask branch was evaluated.
    pub mask_logits: Vec<f64>,
}

impl HeadOutput {
    pub fn class_distribution(&self) -> ClassDistribution {
        ClassDistribution::from_logits(&self.cls_logits)
    }

    pub fn mask_probs(&self) -> Vec<f64> {
        self.mask_logits.iter().map(|&z| sigmoid(z)).collect()
    }
}

/// Upstream gradients for one head evaluation. Empty `mask` skips the mask
/// branch.
#[derive(Debug, Clone, Default)]
pub(crate) struct HeadGrad {
    pub cls: [f64; NUM_CLASSES],
    pub bbox: [f64; 4],
    pub mask: Vec<f64>,
}

impl Segmenter {
    pub(crate) fn heads_forward(&self, params: &ParameterVector, patch: &[f64], with_mask: bool) -> HeadOutput {
        let pv = params.values();
        let o = &self.offsets;
        let d = patch.len();
        let nh = self.config.hidden;
        let hidden: Vec<f64> = (0..nh)
            .map(|k| (pv[o.hid_b + k] + dot(&pv[o.hid_w + k * d..o.hid_w + (k + 1) * d], patch)).tanh())
            .collect();
        let row =
            |base: usize, bias: usize, j: usize| pv[bias + j] + dot(&pv[base + j * nh..base + (j + 1) * nh], &hidden);
        let mut cls_logits = [0.0; NUM_CLASSES];
        for (j, z) in cls_logits.iter_mut().enumerate() {
            *z = row(o.cls_w, o.cls_b, j);
        }
        let mut box_delta = [0.0; 4];
        for (j, z) in box_delta.iter_mut().enumerate() {
            *z = row(o.box_w, o.box_b, j);
        }
        let mask_logits = if with_mask {
            let mm = self.config.mask_size * self.config.mask_size;
            (0..mm).map(|j| row(o.mask_w, o.mask_b, j)).collect()
        } else {
            Vec::new()
        };
        HeadOutput {
            hidden,
            cls_logits,
            box_delta,
            mask_logits,
        }
    }

    /// Accumulates parameter gradients of the heads into `grad` and the
    /// gradient with respect to the patch into `d_patch`.
    pub(crate) fn heads_backward(
        &self,
        params: &ParameterVector,
        patch: &[f64],
        out: &HeadOutput,
        up: &HeadGrad,
        grad: &mut [f64],
        d_patch: &mut [f64],
    ) {
        let pv = params.values();
        let o = &self.offsets;
        let nh = self.config.hidden;
        let d = patch.len();
        let mut dh = vec![0.0; nh];
        let mut branch = |w: usize, b: usize, ups: &[f64], grad: &mut [f64]| {
            for (j, &g) in ups.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad[b + j] += g;
                axpy(g, &out.hidden, &mut grad[w + j * nh..w + (j + 1) * nh]);
                axpy(g, &pv[w + j * nh..w + (j + 1) * nh], &mut dh);
            }
        };
        branch(o.cls_w, o.cls_b, &up.cls, grad);
        branch(o.box_w, o.box_b, &up.bbox, grad);
        if !up.mask.is_empty() {
            branch(o.mask_w, o.mask_b, &up.mask, grad);
        }
        for k in 0..nh {
            let a = out.hidden[k];
            let dpre = dh[k] * (1.0 - a * a);
            if dpre == 0.0 {
                continue;
            }
            grad[o.hid_b + k] += dpre;
            axpy(dpre, patch, &mut grad[o.hid_w + k * d..o.hid_w + (k + 1) * d]);
            axpy(dpre, &pv[o.hid_w + k * d..o.hid_w + (k + 1) * d], d_patch);
        }
    }

    pub fn classify(&self, params: &ParameterVector, patch: &[f64]) -> Result<ClassDistribution> {
        self.check_patch(params, patch)?;
        Ok(self.heads_forward(params, patch, false).class_distribution())
    }

    /// Box revision `(dx, dy, dw, dh)` relative to the proposal, in the
    /// weighted encoding of [`super::encode_box`].
    pub fn revise_box(&self, params: &ParameterVector, patch: &[f64]) -> Result<[f64; 4]> {
        self.check_patch(params, patch)?;
        Ok(self.heads_forward(params, patch, false).box_delta)
    }

    /// `m×m` foreground probabilities over the proposal box, row-major.
    pub fn segment(&self, params: &ParameterVector, patch: &[f64]) -> Result<Vec<f64>> {
        self.check_patch(params, patch)?;
        Ok(self.heads_forward(params, patch, true).mask_probs())
    }

    fn check_patch(&self, params: &ParameterVector, patch: &[f64]) -> Result<()> {
        self.check_params(params)?;
        if patch.len() != self.patch_len() {
            return Err(Error::Shape(format!(
                "patch has {} values, heads expect {}",
                patch.len(),
                self.patch_len()
            )));
        }
        Ok(())
    }
}
