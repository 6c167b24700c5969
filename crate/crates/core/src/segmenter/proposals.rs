use crate::error::Result;
use crate::geometry::{argsort_desc, greedy_nms, BBox};

use super::{dot, FeaturePyramid, ParameterVector, Segmenter, SegmenterConfig, StageGeometry};

/// Candidate boxes in input-image coordinates, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalBatch {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
}

impl ProposalBatch {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// One square anchor per stage cell, centred on the cell and clipped to the
/// image. Order: stage-major, then row-major cells.
pub(crate) fn build_anchors(config: &SegmenterConfig, geometry: &[StageGeometry]) -> Vec<BBox> {
    let mut anchors = Vec::new();
    for (g, st) in geometry.iter().zip(&config.stages) {
        let half = 0.5 * st.anchor_size;
        let s = g.stride as f64;
        for y in 0..g.height {
            for x in 0..g.width {
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                anchors.push(BBox::new(cx - half, cy - half, cx + half, cy + half).clip(config.width, config.height));
            }
        }
    }
    anchors
}

impl Segmenter {
    /// Objectness logit of every anchor: a per-stage 1×1 linear scorer.
    pub fn rpn_logits(&self, params: &ParameterVector, pyramid: &FeaturePyramid) -> Vec<f64> {
        let pv = params.values();
        let mut out = Vec::with_capacity(self.anchors.len());
        for (t, stage) in pyramid.stages.iter().enumerate() {
            let w = &pv[self.offsets.rpn_w[t]..self.offsets.rpn_w[t] + stage.channels];
            let b = pv[self.offsets.rpn_b[t]];
            let plane = stage.height * stage.width;
            let mut scores = vec![b; plane];
            for (c, &wc) in w.iter().enumerate() {
                let src = &stage.data[c * plane..(c + 1) * plane];
                for (s, &v) in scores.iter_mut().zip(src) {
                    *s += wc * v;
                }
            }
            out.extend(scores);
        }
        out
    }

    pub(crate) fn rpn_backward(
        &self,
        params: &ParameterVector,
        pyramid: &FeaturePyramid,
        dlogits: &[f64],
        grad: &mut [f64],
        d_stages: &mut FeaturePyramid,
    ) {
        let pv = params.values();
        let mut start = 0;
        for (t, stage) in pyramid.stages.iter().enumerate() {
            let plane = stage.height * stage.width;
            let d = &dlogits[start..start + plane];
            start += plane;
            grad[self.offsets.rpn_b[t]] += d.iter().sum::<f64>();
            let wo = self.offsets.rpn_w[t];
            for c in 0..stage.channels {
                let src = &stage.data[c * plane..(c + 1) * plane];
                grad[wo + c] += dot(d, src);
                let wc = pv[wo + c];
                let dst = &mut d_stages.stages[t].data[c * plane..(c + 1) * plane];
                for (g, &dv) in dst.iter_mut().zip(d) {
                    *g += wc * dv;
                }
            }
        }
    }

    /// Ranks anchors by logit (ties to the lower index), suppresses overlaps
    /// above the configured IoU and keeps the best `proposals` boxes.
    pub fn proposals_from_logits(&self, logits: &[f64]) -> ProposalBatch {
        let order = argsort_desc(logits);
        let kept = greedy_nms(&self.anchors, &order, self.config.rpn_nms_iou, self.config.proposals);
        ProposalBatch {
            boxes: kept.iter().map(|&i| self.anchors[i]).collect(),
            scores: kept.iter().map(|&i| logits[i]).collect(),
        }
    }

    pub fn propose(&self, params: &ParameterVector, pyramid: &FeaturePyramid) -> Result<ProposalBatch> {
        self.check_params(params)?;
        Ok(self.proposals_from_logits(&self.rpn_logits(params, pyramid)))
    }
}
