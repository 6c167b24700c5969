use crate::error::Result;
use crate::geometry::{argsort_desc, greedy_nms, BBox};
use crate::image::Image;
use crate::mask::Mask;
use crate::synth::ClassId;

use super::loss::decode_box;
use super::{ParameterVector, Segmenter};

/// One predicted instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: ClassId,
    pub score: f64,
    pub mask: Mask,
}

/// Pixels `[lo, hi)` along one axis whose centres fall inside `[a, b)`.
fn covered(a: f64, b: f64, len: usize) -> (usize, usize) {
    let lo = (a - 0.5).ceil().max(0.0) as usize;
    let hi = ((b - 0.5).ceil().max(0.0) as usize).min(len);
    (lo.min(hi), hi)
}

/// Pastes an `m×m` probability grid into `bbox` at image resolution and
/// thresholds it at 0.5. A pixel belongs to the box when its centre does; it
/// reads the grid bin containing that centre.
pub fn paste_mask(probs: &[f64], mask_size: usize, bbox: &BBox, height: usize, width: usize) -> Mask {
    let mut out = Mask::empty(height, width);
    if !bbox.has_positive_area() {
        return out;
    }
    let m = mask_size as f64;
    let (y_lo, y_hi) = covered(bbox.y0, bbox.y1, height);
    let (x_lo, x_hi) = covered(bbox.x0, bbox.x1, width);
    for y in y_lo..y_hi {
        let u = (((y as f64 + 0.5 - bbox.y0) / bbox.height() * m) as usize).min(mask_size - 1);
        for x in x_lo..x_hi {
            let v = (((x as f64 + 0.5 - bbox.x0) / bbox.width() * m) as usize).min(mask_size - 1);
            if probs[u * mask_size + v] >= 0.5 {
                out.set(y, x, true);
            }
        }
    }
    out
}

impl Segmenter {
    /// Full inference: proposals, classification, box revision, per-class
    /// suppression, then a mask pass on each revised box. Detections come
    /// back best first; empty masks are dropped.
    pub fn predict(&self, params: &ParameterVector, image: &Image) -> Result<Vec<Detection>> {
        let cfg = &self.config;
        let pyr = self.extract_features(params, image)?;
        let proposals = self.propose(params, &pyr)?;

        let mut cands: Vec<(BBox, usize, f64)> = Vec::new();
        for b in &proposals.boxes {
            let out = self.heads_forward(params, &self.roi_extract(&pyr, b)?, false);
            let probs = out.class_distribution().probs;
            let class = if probs[2] > probs[1] { 2 } else { 1 };
            if probs[class] < cfg.score_threshold {
                continue;
            }
            let revised = decode_box(b, &out.box_delta, &cfg.box_weights).clip(cfg.width, cfg.height);
            if revised.has_positive_area() {
                cands.push((revised, class, probs[class]));
            }
        }

        let mut kept: Vec<usize> = Vec::new();
        for class in [1, 2] {
            let idx: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].1 == class).collect();
            let boxes: Vec<BBox> = idx.iter().map(|&i| cands[i].0).collect();
            let scores: Vec<f64> = idx.iter().map(|&i| cands[i].2).collect();
            let order = argsort_desc(&scores);
            kept.extend(
                greedy_nms(&boxes, &order, cfg.detection_nms_iou, usize::MAX)
                    .into_iter()
                    .map(|k| idx[k]),
            );
        }
        kept.sort_unstable();
        let scores: Vec<f64> = kept.iter().map(|&i| cands[i].2).collect();
        let order = argsort_desc(&scores);

        let mut detections = Vec::new();
        for &o in order.iter().take(cfg.max_detections) {
            let (bbox, class, score) = cands[kept[o]];
            let out = self.heads_forward(params, &self.roi_extract(&pyr, &bbox)?, true);
            let mask = paste_mask(&out.mask_probs(), cfg.mask_size, &bbox, cfg.height, cfg.width);
            if mask.is_empty() {
                continue;
            }
            detections.push(Detection {
                bbox,
                class_id: ClassId::from_index(class).expect("foreground class"),
                score,
                mask,
            });
        }
        Ok(detections)
    }
}
