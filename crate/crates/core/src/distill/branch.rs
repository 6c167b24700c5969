use serde::{Deserialize, Serialize};

use crate::augment::{apply, map_boxes, map_mask, View, ViewSet};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;
use crate::mask::Mask;
use crate::segmenter::{ClassDistribution, FeaturePyramid, HeadGrad, ParameterVector, Segmenter, NUM_CLASSES};

use super::{
    mgd_loss_and_grad, mine_samples, pool_mask, psm_loss, union_of_masks, weighted_cross_entropy_logit_grad,
    MinedSelection, PseudoLabelSet,
};

/// What one student view is trained against.
#[derive(Debug, Clone)]
pub struct StudentViewTarget {
    pub view: View,
    /// Kept proposals carried into this view's coordinates.
    pub boxes: Vec<BBox>,
    /// Teacher's adapted features on the view's geometry alone (no colour
    /// or erasing).
    pub teacher_adapted: FeaturePyramid,
    /// Foreground mask per stage, in this view's coordinates.
    pub stage_masks: Vec<Mask>,
}

/// Teacher-side results for one unlabeled scene. Nothing in here depends on
/// the student, so it stays fixed while the student loss is differentiated.
#[derive(Debug, Clone)]
pub struct UnsupervisedTargets {
    pub pseudo: PseudoLabelSet,
    pub selection: MinedSelection,
    /// Sharpened targets of the kept proposals, in `selection` order.
    pub targets: Vec<ClassDistribution>,
    pub labels: Vec<usize>,
    pub image_mask: Mask,
    pub views: Vec<StudentViewTarget>,
}

impl UnsupervisedTargets {
    pub fn kept_foreground(&self) -> usize {
        self.selection.s_foreground
    }

    pub fn kept_background(&self) -> usize {
        self.selection.kept_indices.len() - self.selection.s_foreground
    }
}

/// Runs the teacher on the clean image and its views: proposals, per-view
/// class distributions, pseudo-labels, mining, the foreground mask and the
/// teacher features each student view is compared with.
///
/// Targets are sharpened with exponent `1/temperature`, so temperatures
/// below 1 make them more confident.
pub fn prepare_unsupervised(
    model: &Segmenter,
    teacher: &ParameterVector,
    image: &Image,
    views: &ViewSet,
    temperature: f64,
) -> Result<UnsupervisedTargets> {
    if views.student_views.is_empty() {
        return Err(Error::Invalid("no student views".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Invalid(format!("temperature {temperature} must be positive")));
    }
    let cfg = model.config();
    let (h, w) = (image.height(), image.width());
    let clean = model.extract_features(teacher, image)?;
    let proposals = model.propose(teacher, &clean)?;

    let mut per_view = Vec::with_capacity(views.teacher_views.len());
    for v in &views.teacher_views {
        let pyr = model.extract_features(teacher, &v.image)?;
        let boxes = map_boxes(&v.record, &proposals.boxes, w, h)?;
        per_view.push(
            boxes
                .iter()
                .map(|b| {
                    Ok(model
                        .heads_forward(teacher, &model.roi_extract(&pyr, b)?, false)
                        .class_distribution())
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let pseudo = PseudoLabelSet::from_views(&per_view, proposals, 1.0 / temperature)?;
    let selection = mine_samples(&pseudo);
    let kept = &selection.kept_indices;

    let mut fg_masks = Vec::new();
    for &i in kept.iter().filter(|&&i| pseudo.hard_label[i] != 0) {
        let b = pseudo.proposals.boxes[i];
        let out = model.heads_forward(teacher, &model.roi_extract(&clean, &b)?, true);
        fg_masks.push((b, out.mask_probs()));
    }
    let image_mask = union_of_masks(&fg_masks, cfg.mask_size, h, w);

    let kept_boxes: Vec<BBox> = kept.iter().map(|&i| pseudo.proposals.boxes[i]).collect();
    let mut adapted: [Option<FeaturePyramid>; 2] = [None, None];
    let mut student_targets = Vec::with_capacity(views.student_views.len());
    for v in &views.student_views {
        let slot = usize::from(v.record.flipped);
        if adapted[slot].is_none() {
            let pyr = if v.record.flipped {
                model.extract_features(teacher, &apply(image, &v.record.geometric()))?
            } else {
                clean.clone()
            };
            adapted[slot] = Some(model.adapt(teacher, &pyr)?);
        }
        let view_mask = map_mask(&v.record, &image_mask);
        student_targets.push(StudentViewTarget {
            view: v.clone(),
            boxes: map_boxes(&v.record, &kept_boxes, w, h)?,
            teacher_adapted: adapted[slot].clone().expect("filled above"),
            stage_masks: model
                .geometry()
                .iter()
                .map(|g| pool_mask(&view_mask, g.stride, g.height, g.width))
                .collect(),
        });
    }

    Ok(UnsupervisedTargets {
        targets: kept.iter().map(|&i| pseudo.sharpened_dist[i].clone()).collect(),
        labels: kept.iter().map(|&i| pseudo.hard_label[i]).collect(),
        pseudo,
        selection,
        image_mask,
        views: student_targets,
    })
}

/// Gradient multipliers for the two unsupervised terms; `None` disables a
/// term entirely (its value is reported as 0 and nothing is computed).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnsupervisedWeights {
    pub psm: Option<f64>,
    pub mgd: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UnsupervisedLoss {
    pub psm: f64,
    pub mgd: f64,
}

/// Student-side unsupervised losses for fixed teacher targets. When `grad`
/// is given, accumulates `w_psm·∇psm + w_mgd·∇mgd` into it.
pub fn unsupervised_loss(
    model: &Segmenter,
    student: &ParameterVector,
    targets: &UnsupervisedTargets,
    background_weight: f64,
    weights: UnsupervisedWeights,
    mut grad: Option<&mut [f64]>,
) -> Result<UnsupervisedLoss> {
    let mut class_weights = [1.0; NUM_CLASSES];
    class_weights[0] = background_weight;
    let n_views = targets.views.len() as f64;
    let mut student_dists = Vec::with_capacity(targets.views.len());
    let mut mgd = 0.0;

    for vt in &targets.views {
        let cache = model.backbone_forward(student, &vt.view.image)?;
        let pyr = &cache.pyramid;
        let mut d_stages = grad.is_some().then(|| pyr.zeros_like());
        let mut touched = false;

        if let Some(w_psm) = weights.psm {
            let mut dists = Vec::with_capacity(vt.boxes.len());
            let per_proposal = w_psm / (n_views * targets.targets.len().max(1) as f64);
            let mut d_patch = vec![0.0; model.patch_len()];
            for ((b, t), &c) in vt.boxes.iter().zip(&targets.targets).zip(&targets.labels) {
                let sampler = model.roi_sampler(b)?;
                let patch = sampler.extract(pyr);
                let out = model.heads_forward(student, &patch, false);
                let dist = out.class_distribution();
                if let (Some(g), Some(ds)) = (grad.as_deref_mut(), d_stages.as_mut()) {
                    let dz = weighted_cross_entropy_logit_grad(&dist, t, class_weights[c]);
                    let mut up = HeadGrad::default();
                    for (u, d) in up.cls.iter_mut().zip(dz) {
                        *u = per_proposal * d;
                    }
                    d_patch.fill(0.0);
                    model.heads_backward(student, &patch, &out, &up, g, &mut d_patch);
                    sampler.backward(&d_patch, ds);
                    touched = true;
                }
                dists.push(dist);
            }
            student_dists.push(dists);
        }

        if let Some(w_mgd) = weights.mgd {
            let student_adapted = model.adapt(student, pyr)?;
            let (value, d_adapted) =
                mgd_loss_and_grad(&vt.teacher_adapted, &student_adapted, &vt.stage_masks, grad.is_some())?;
            mgd += value / n_views;
            if let (Some(g), Some(ds), Some(mut da)) = (grad.as_deref_mut(), d_stages.as_mut(), d_adapted) {
                let scale = w_mgd / n_views;
                for s in &mut da.stages {
                    for v in &mut s.data {
                        *v *= scale;
                    }
                }
                model.adapt_backward(student, pyr, &da, g, ds);
                touched = true;
            }
        }

        if let (Some(g), Some(mut ds)) = (grad.as_deref_mut(), d_stages) {
            if touched {
                model.backbone_backward(student, &cache, &mut ds, g);
            }
        }
    }

    let psm = if weights.psm.is_some() {
        psm_loss(&student_dists, &targets.targets, &targets.labels, &class_weights)?
    } else {
        0.0
    };
    Ok(UnsupervisedLoss { psm, mgd })
}
