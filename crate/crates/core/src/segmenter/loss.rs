use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;
use crate::synth::{Instance, Scene};

use super::backbone::BackboneCache;
use super::heads::{sigmoid, HeadGrad, HeadOutput};
use super::{ParameterVector, Segmenter, NUM_CLASSES};

/// Largest log-scale change accepted when decoding a box revision.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Weighted centre/log-size offsets that carry `proposal` onto `target`.
pub fn encode_box(proposal: &BBox, target: &BBox, weights: &[f64; 4]) -> [f64; 4] {
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    [
        weights[0] * (tcx - pcx) / pw,
        weights[1] * (tcy - pcy) / ph,
        weights[2] * (target.width() / pw).ln(),
        weights[3] * (target.height() / ph).ln(),
    ]
}

/// Inverse of [`encode_box`]; log-size offsets are clamped.
pub fn decode_box(proposal: &BBox, delta: &[f64; 4], weights: &[f64; 4]) -> BBox {
    let (pcx, pcy) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = pcx + delta[0] / weights[0] * pw;
    let cy = pcy + delta[1] / weights[1] * ph;
    let w = pw * (delta[2] / weights[2]).min(MAX_LOG_SCALE).exp();
    let h = ph * (delta[3] / weights[3]).min(MAX_LOG_SCALE).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// One sampled region of interest and what the heads should produce for it.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTarget {
    pub bbox: BBox,
    /// 0 for background.
    pub class: usize,
    pub box_target: [f64; 4],
    /// `m×m` binary target, empty for background.
    pub mask_target: Vec<f64>,
}

impl RoiTarget {
    pub fn is_foreground(&self) -> bool {
        self.class > 0
    }
}

/// Everything the supervised loss needs besides the model outputs. Holding
/// it fixed makes the loss a smooth function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedTargets {
    /// Per anchor: 1 positive, 0 negative, -1 ignored.
    pub anchor_labels: Vec<i8>,
    pub rois: Vec<RoiTarget>,
}

impl SupervisedTargets {
    pub fn foreground_count(&self) -> usize {
        self.rois.iter().filter(|r| r.is_foreground()).count()
    }
}

/// Raw model outputs for a [`SupervisedTargets`]: one head output per RoI.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedOutputs {
    pub rpn_logits: Vec<f64>,
    pub heads: Vec<HeadOutput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SupervisedLoss {
    pub cls: f64,
    pub reg: f64,
    pub seg: f64,
    pub rpn: f64,
}

impl SupervisedLoss {
    pub fn total(&self) -> f64 {
        self.cls + self.reg + self.seg + self.rpn
    }
}

/// Per-component multipliers applied to the gradient. Reported loss values
/// are never weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub seg: f64,
    pub rpn: f64,
}

impl LossWeights {
    pub const ALL: LossWeights = LossWeights {
        cls: 1.0,
        reg: 1.0,
        seg: 1.0,
        rpn: 1.0,
    };
    pub const NONE: LossWeights = LossWeights {
        cls: 0.0,
        reg: 0.0,
        seg: 0.0,
        rpn: 0.0,
    };

    pub fn only_cls() -> Self {
        LossWeights { cls: 1.0, ..Self::NONE }
    }

    pub fn only_reg() -> Self {
        LossWeights { reg: 1.0, ..Self::NONE }
    }

    pub fn only_seg() -> Self {
        LossWeights { seg: 1.0, ..Self::NONE }
    }

    pub fn only_rpn() -> Self {
        LossWeights { rpn: 1.0, ..Self::NONE }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::ALL
    }
}

/// Nearest-pixel sample of `mask` at the bin centres of an `m×m` grid laid
/// over `bbox`.
fn mask_target(instance: &Instance, bbox: &BBox, m: usize) -> Vec<f64> {
    let (h, w) = (instance.mask.height(), instance.mask.width());
    let mut out = Vec::with_capacity(m * m);
    for u in 0..m {
        let y = bbox.y0 + (u as f64 + 0.5) * bbox.height() / m as f64;
        let py = (y.floor().max(0.0) as usize).min(h - 1);
        for v in 0..m {
            let x = bbox.x0 + (v as f64 + 0.5) * bbox.width() / m as f64;
            let px = (x.floor().max(0.0) as usize).min(w - 1);
            out.push(if instance.mask.get(py, px) { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Index and value of the best IoU against `gts`, ties to the lower index.
fn best_match(b: &BBox, gts: &[&BBox]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gts.iter().enumerate() {
        let iou = b.iou(g);
        if best.is_none_or(|(_, v)| iou > v) {
            best = Some((i, iou));
        }
    }
    best
}

impl Segmenter {
    /// Assigns anchor labels and samples RoIs for `scene`, using proposals
    /// from the given anchor logits plus the ground-truth boxes themselves.
    pub fn supervised_targets(&self, scene: &Scene, rpn_logits: &[f64]) -> Result<SupervisedTargets> {
        let Some(instances) = scene.instances.as_deref() else {
            return Err(Error::Invalid("supervised loss needs an annotated scene".into()));
        };
        let cfg = &self.config;
        let gts: Vec<&BBox> = instances.iter().map(|i| &i.bbox).collect();

        let mut anchor_labels: Vec<i8> = self
            .anchors
            .iter()
            .map(|a| match best_match(a, &gts) {
                Some((_, iou)) if iou >= cfg.rpn_pos_iou => 1,
                Some((_, iou)) if iou >= cfg.rpn_neg_iou => -1,
                _ => 0,
            })
            .collect();
        // every ground truth gets at least its best anchor
        for g in &gts {
            let anchor_refs: Vec<&BBox> = self.anchors.iter().collect();
            if let Some((i, iou)) = best_match(g, &anchor_refs) {
                if iou > 0.0 {
                    anchor_labels[i] = 1;
                }
            }
        }

        let mut candidates = self.proposals_from_logits(rpn_logits).boxes;
        candidates.extend(gts.iter().map(|g| **g));
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for b in candidates {
            match best_match(&b, &gts) {
                Some((gi, iou)) if iou >= cfg.fg_iou => {
                    let inst = &instances[gi];
                    fg.push(RoiTarget {
                        bbox: b,
                        class: inst.class_id.index(),
                        box_target: encode_box(&b, &inst.bbox, &cfg.box_weights),
                        mask_target: mask_target(inst, &b, cfg.mask_size),
                    });
                }
                Some((_, iou)) if iou >= cfg.bg_iou => {}
                _ => bg.push(RoiTarget {
                    bbox: b,
                    class: 0,
                    box_target: [0.0; 4],
                    mask_target: Vec::new(),
                }),
            }
        }
        bg.truncate((cfg.bg_per_fg * fg.len()).max(cfg.min_bg));
        fg.extend(bg);
        Ok(SupervisedTargets {
            anchor_labels,
            rois: fg,
        })
    }

    /// Loss components for given outputs, with gradients with respect to the
    /// anchor logits and each head's outputs, already scaled by `weights`.
    fn supervised_loss_grads(
        &self,
        targets: &SupervisedTargets,
        outputs: &SupervisedOutputs,
        weights: &LossWeights,
    ) -> (SupervisedLoss, Vec<f64>, Vec<HeadGrad>) {
        let mut loss = SupervisedLoss::default();

        let npos = targets.anchor_labels.iter().filter(|&&l| l == 1).count();
        let nneg = targets.anchor_labels.iter().filter(|&&l| l == 0).count();
        let mut d_rpn = vec![0.0; outputs.rpn_logits.len()];
        for ((&z, &label), d) in outputs.rpn_logits.iter().zip(&targets.anchor_labels).zip(&mut d_rpn) {
            match label {
                1 => {
                    let k = 0.5 / npos as f64;
                    loss.rpn += k * softplus(-z);
                    *d = weights.rpn * k * (sigmoid(z) - 1.0);
                }
                0 => {
                    let k = 0.5 / nneg as f64;
                    loss.rpn += k * softplus(z);
                    *d = weights.rpn * k * sigmoid(z);
                }
                _ => {}
            }
        }

        let n = targets.rois.len();
        let nfg = targets.foreground_count();
        let mm = self.config.mask_size * self.config.mask_size;
        let mut head_grads = Vec::with_capacity(n);
        for (roi, out) in targets.rois.iter().zip(&outputs.heads) {
            let mut g = HeadGrad::default();
            let max = out.cls_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + out.cls_logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss.cls += (lse - out.cls_logits[roi.class]) / n as f64;
            for j in 0..NUM_CLASSES {
                let p = (out.cls_logits[j] - lse).exp();
                let t = if j == roi.class { 1.0 } else { 0.0 };
                g.cls[j] = weights.cls * (p - t) / n as f64;
            }
            if roi.is_foreground() {
                for k in 0..4 {
                    let (v, d) = smooth_l1(out.box_delta[k] - roi.box_target[k]);
                    loss.reg += v / nfg as f64;
                    g.bbox[k] = weights.reg * d / nfg as f64;
                }
                let scale = 1.0 / (nfg * mm) as f64;
                g.mask = Vec::with_capacity(mm);
                for (&z, &t) in out.mask_logits.iter().zip(&roi.mask_target) {
                    loss.seg += scale * (softplus(z) - t * z);
                    g.mask.push(weights.seg * scale * (sigmoid(z) - t));
                }
            }
            head_grads.push(g);
        }
        (loss, d_rpn, head_grads)
    }

    pub fn supervised_loss_from_outputs(
        &self,
        targets: &SupervisedTargets,
        outputs: &SupervisedOutputs,
    ) -> SupervisedLoss {
        self.supervised_loss_grads(targets, outputs, &LossWeights::NONE).0
    }

    /// Runs the model on every target RoI. Mask logits are produced for
    /// foreground RoIs only.
    pub fn supervised_outputs(
        &self,
        params: &ParameterVector,
        image: &Image,
        targets: &SupervisedTargets,
    ) -> Result<SupervisedOutputs> {
        let cache = self.backbone_forward(params, image)?;
        Ok(self
            .supervised_pass(params, &cache, targets, &LossWeights::NONE, None)?
            .1)
    }

    fn supervised_pass(
        &self,
        params: &ParameterVector,
        cache: &BackboneCache,
        targets: &SupervisedTargets,
        weights: &LossWeights,
        grad: Option<&mut [f64]>,
    ) -> Result<(SupervisedLoss, SupervisedOutputs)> {
        let pyr = &cache.pyramid;
        let rpn_logits = self.rpn_logits(params, pyr);
        let mut samplers = Vec::with_capacity(targets.rois.len());
        let mut patches = Vec::with_capacity(targets.rois.len());
        let mut heads = Vec::with_capacity(targets.rois.len());
        for roi in &targets.rois {
            let sampler = self.roi_sampler(&roi.bbox)?;
            let patch = sampler.extract(pyr);
            heads.push(self.heads_forward(params, &patch, roi.is_foreground()));
            samplers.push(sampler);
            patches.push(patch);
        }
        let outputs = SupervisedOutputs { rpn_logits, heads };
        let (loss, d_rpn, head_grads) = self.supervised_loss_grads(targets, &outputs, weights);
        if let Some(grad) = grad {
            let mut d_stages = pyr.zeros_like();
            let mut d_patch = vec![0.0; self.patch_len()];
            for (((sampler, patch), out), g) in samplers.iter().zip(&patches).zip(&outputs.heads).zip(&head_grads) {
                d_patch.fill(0.0);
                self.heads_backward(params, patch, out, g, grad, &mut d_patch);
                sampler.backward(&d_patch, &mut d_stages);
            }
            if weights.rpn != 0.0 {
                self.rpn_backward(params, pyr, &d_rpn, grad, &mut d_stages);
            }
            self.backbone_backward(params, cache, &mut d_stages, grad);
        }
        Ok((loss, outputs))
    }

    /// Supervised loss at fixed targets; accumulates the weighted gradient
    /// into `grad` when given.
    pub fn supervised_loss_with_targets(
        &self,
        params: &ParameterVector,
        image: &Image,
        targets: &SupervisedTargets,
        weights: &LossWeights,
        grad: Option<&mut [f64]>,
    ) -> Result<SupervisedLoss> {
        let cache = self.backbone_forward(params, image)?;
        Ok(self.supervised_pass(params, &cache, targets, weights, grad)?.0)
    }

    /// Supervised loss on an annotated scene, with proposals from the
    /// model's own scorer. Accumulates the weighted gradient when given.
    pub fn supervised_loss(
        &self,
        params: &ParameterVector,
        scene: &Scene,
        weights: &LossWeights,
        grad: Option<&mut [f64]>,
    ) -> Result<(SupervisedLoss, SupervisedTargets)> {
        let cache = self.backbone_forward(params, &scene.image)?;
        let targets = self.supervised_targets(scene, &self.rpn_logits(params, &cache.pyramid))?;
        let loss = self.supervised_pass(params, &cache, &targets, weights, grad)?.0;
        Ok((loss, targets))
    }
}

#[cfg(test)]
mod tests {
    use super::super::SegmenterConfig;
    use super::*;
    use crate::rng::stream;
    use crate::synth::{generate_scene, GeneratorConfig, Range};
    use rand::Rng;

    fn small() -> (Segmenter, GeneratorConfig) {
        let cfg = SegmenterConfig {
            height: 48,
            width: 48,
            hidden: 16,
            ..SegmenterConfig::default()
        };
        let gen = GeneratorConfig {
            height: 48,
            width: 48,
            cell_count: Range::new(1, 2),
            cytoplasm_axes: Range::new(7.0, 10.0),
            nucleus_axes: Range::new(2.0, 4.0),
            ..GeneratorConfig::default()
        };
        (Segmenter::new(cfg).unwrap(), gen)
    }

    #[test]
    fn box_encoding_roundtrips() {
        let w = [10.0, 10.0, 5.0, 5.0];
        let p = BBox::new(3.0, 4.0, 20.0, 15.0);
        let t = BBox::new(5.5, 2.0, 18.0, 30.0);
        let back = decode_box(&p, &encode_box(&p, &t, &w), &w);
        for (a, b) in back.to_array().iter().zip(t.to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(encode_box(&p, &p, &w), [0.0; 4]);
    }

    #[test]
    fn empty_scene_has_no_foreground_terms() {
        let (m, mut gen) = small();
        gen.cell_count = Range::new(0, 0);
        let scene = generate_scene(3, &gen).unwrap();
        let (loss, targets) = m
            .supervised_loss(&m.init_params(1), &scene, &LossWeights::ALL, None)
            .unwrap();
        assert_eq!(targets.foreground_count(), 0);
        assert_eq!(targets.rois.len(), 8);
        assert_eq!((loss.reg, loss.seg), (0.0, 0.0));
        assert!(loss.cls >= 0.0 && loss.rpn >= 0.0);
    }

    #[test]
    fn unannotated_scene_is_rejected() {
        let (m, gen) = small();
        let mut scene = generate_scene(3, &gen).unwrap();
        scene.instances = None;
        assert!(m
            .supervised_loss(&m.zero_params(), &scene, &LossWeights::ALL, None)
            .is_err());
    }

    #[test]
    fn perfect_outputs_give_vanishing_loss() {
        let (m, gen) = small();
        let scene = generate_scene(11, &gen).unwrap();
        let p = m.init_params(2);
        let (_, targets) = m.supervised_loss(&p, &scene, &LossWeights::ALL, None).unwrap();
        assert!(targets.foreground_count() > 0);
        let rpn_logits = targets
            .anchor_labels
            .iter()
            .map(|&l| if l == 1 { 50.0 } else { -50.0 })
            .collect();
        let heads = targets
            .rois
            .iter()
            .map(|r| {
                let mut cls_logits = [-50.0; NUM_CLASSES];
                cls_logits[r.class] = 50.0;
                HeadOutput {
                    hidden: Vec::new(),
                    cls_logits,
                    box_delta: r.box_target,
                    mask_logits: r
                        .mask_target
                        .iter()
                        .map(|&t| if t > 0.5 { 50.0 } else { -50.0 })
                        .collect(),
                }
            })
            .collect();
        let loss = m.supervised_loss_from_outputs(&targets, &SupervisedOutputs { rpn_logits, heads });
        assert!(loss.total() < 1e-6, "{loss:?}");
    }

    #[test]
    fn losses_are_nonnegative_over_random_pairs() {
        let (m, gen) = small();
        let mut rng = stream(99, &[]);
        for i in 0..100u64 {
            let mut p = m.init_params(i);
            let scale = rng.gen_range(0.0..0.5);
            for v in p.values_mut() {
                *v += scale * rng.gen_range(-1.0..1.0);
            }
            let scene = generate_scene(1000 + i, &gen).unwrap();
            let (loss, _) = m.supervised_loss(&p, &scene, &LossWeights::ALL, None).unwrap();
            for v in [loss.cls, loss.reg, loss.seg, loss.rpn] {
                assert!(v >= 0.0 && v.is_finite(), "pair {i}: {loss:?}");
            }
        }
    }

    #[test]
    fn mask_targets_follow_the_instance() {
        let (m, gen) = small();
        let scene = generate_scene(5, &gen).unwrap();
        let inst = &scene.instances()[0];
        let t = mask_target(inst, &inst.bbox, 14);
        // a tight box around an ellipse has its centre bin set and is not all ones
        assert_eq!(t[7 * 14 + 7], 1.0);
        assert!(t.contains(&0.0));
        let _ = m;
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let (m, gen) = small();
        let scene = generate_scene(21, &gen).unwrap();
        let mut p = m.init_params(8);
        let mut rng = stream(8, &[1]);
        for v in p.values_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let (_, targets) = m.supervised_loss(&p, &scene, &LossWeights::ALL, None).unwrap();
        let mut grad = m.zero_grad();
        m.supervised_loss_with_targets(&p, &scene.image, &targets, &LossWeights::ALL, Some(&mut grad))
            .unwrap();
        let f = |p: &ParameterVector| {
            m.supervised_loss_with_targets(p, &scene.image, &targets, &LossWeights::ALL, None)
                .unwrap()
                .total()
        };
        let h = 1e-4;
        for seg in m.layout().segments().to_vec() {
            for _ in 0..3 {
                let idx = seg.offset + rng.gen_range(0..seg.len);
                let orig = p.values()[idx];
                p.values_mut()[idx] = orig + h;
                let fp = f(&p);
                p.values_mut()[idx] = orig - h;
                let fm = f(&p);
                p.values_mut()[idx] = orig;
                let num = (fp - fm) / (2.0 * h);
                let rel = (num - grad[idx]).abs() / num.abs().max(grad[idx].abs()).max(1e-6);
                if seg.name.starts_with("adapt") {
                    assert_eq!(grad[idx], 0.0);
                }
                assert!(
                    rel <= 1e-4,
                    "{} [{idx}]: analytic {} numeric {num}",
                    seg.name,
                    grad[idx]
                );
            }
        }
    }
}
