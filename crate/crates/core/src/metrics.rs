//! Aggregated Jaccard Index and mask average precision.
//!
//! AJI matches ground truths in index order, each to its best-IoU unused
//! prediction (ties to the lower index; zero-overlap predictions are never
//! matched). AP follows the COCO recipe: predictions in descending score
//! order greedily take the best-IoU unmatched ground truth above the
//! threshold, and precision is interpolated at 101 recall points.
//!
//! Set-level evaluation pools images: AJI sums intersections and unions over
//! all images, AP ranks all detections of the set together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::segmenter::Detection;
use crate::synth::{ClassId, Instance};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub mask: Mask,
    pub class_id: ClassId,
    pub score: f64,
}

/// Instances of one image. Ground truth carries score 1.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstanceSet {
    pub instances: Vec<ScoredInstance>,
}

impl InstanceSet {
    pub fn new(instances: Vec<ScoredInstance>) -> Result<Self> {
        if let Some(first) = instances.first() {
            if instances.iter().any(|i| !i.mask.same_shape(&first.mask)) {
                return Err(Error::Shape("instance masks differ in size".into()));
            }
        }
        if instances.iter().any(|i| !(0.0..=1.0).contains(&i.score)) {
            return Err(Error::Invalid("instance scores must lie in [0, 1]".into()));
        }
        Ok(InstanceSet { instances })
    }

    pub fn from_ground_truth(instances: &[Instance]) -> Self {
        InstanceSet {
            instances: instances
                .iter()
                .map(|i| ScoredInstance {
                    mask: i.mask.clone(),
                    class_id: i.class_id,
                    score: 1.0,
                })
                .collect(),
        }
    }

    pub fn from_detections(detections: &[Detection]) -> Self {
        InstanceSet {
            instances: detections
                .iter()
                .map(|d| ScoredInstance {
                    mask: d.mask.clone(),
                    class_id: d.class_id,
                    score: d.score.clamp(0.0, 1.0),
                })
                .collect(),
        }
    }

    pub fn of_class(&self, class: ClassId) -> InstanceSet {
        InstanceSet {
            instances: self.instances.iter().filter(|i| i.class_id == class).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

fn check_dims(pred: &InstanceSet, gt: &InstanceSet) -> Result<()> {
    let mut all = pred.instances.iter().chain(&gt.instances);
    if let Some(first) = all.next() {
        if all.any(|i| !i.mask.same_shape(&first.mask)) {
            return Err(Error::Shape("prediction and ground-truth masks differ in size".into()));
        }
    }
    Ok(())
}

/// `inter[g][p]` and per-instance areas.
struct Overlaps {
    inter: Vec<Vec<usize>>,
    pred_area: Vec<usize>,
    gt_area: Vec<usize>,
}

impl Overlaps {
    fn new(pred: &InstanceSet, gt: &InstanceSet) -> Self {
        Overlaps {
            inter: gt
                .instances
                .iter()
                .map(|g| pred.instances.iter().map(|p| g.mask.intersection(&p.mask)).collect())
                .collect(),
            pred_area: pred.instances.iter().map(|p| p.mask.area()).collect(),
            gt_area: gt.instances.iter().map(|g| g.mask.area()).collect(),
        }
    }

    fn iou(&self, g: usize, p: usize) -> f64 {
        let i = self.inter[g][p];
        let u = self.gt_area[g] + self.pred_area[p] - i;
        if u == 0 {
            0.0
        } else {
            i as f64 / u as f64
        }
    }
}

/// Aggregated intersection and union for one image and one class.
pub fn aji_counts(pred: &InstanceSet, gt: &InstanceSet) -> Result<(u64, u64)> {
    check_dims(pred, gt)?;
    let ov = Overlaps::new(pred, gt);
    let mut used = vec![false; pred.len()];
    let (mut inter, mut union) = (0u64, 0u64);
    for g in 0..gt.len() {
        let mut best: Option<(usize, f64)> = None;
        for p in (0..pred.len()).filter(|&p| !used[p]) {
            let iou = ov.iou(g, p);
            if iou > 0.0 && best.is_none_or(|(_, b)| iou > b) {
                best = Some((p, iou));
            }
        }
        match best {
            Some((p, _)) => {
                used[p] = true;
                let i = ov.inter[g][p];
                inter += i as u64;
                union += (ov.gt_area[g] + ov.pred_area[p] - i) as u64;
            }
            None => union += ov.gt_area[g] as u64,
        }
    }
    union += (0..pred.len())
        .filter(|&p| !used[p])
        .map(|p| ov.pred_area[p] as u64)
        .sum::<u64>();
    Ok((inter, union))
}

fn aji_ratio(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// AJI of one image for a single class (the caller filters by class). Both
/// sets empty gives 1.
pub fn aji(pred: &InstanceSet, gt: &InstanceSet) -> Result<f64> {
    let (i, u) = aji_counts(pred, gt)?;
    Ok(aji_ratio(i, u))
}

/// True/false-positive flags for every prediction of every image, in global
/// score order, at one IoU threshold.
fn match_at(images: &[(Overlaps, Vec<f64>)], threshold: f64) -> Vec<bool> {
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(im, (_, scores))| (0..scores.len()).map(move |p| (im, p)))
        .collect();
    order.sort_by(|a, b| images[b.0].1[b.1].total_cmp(&images[a.0].1[a.1]).then(a.cmp(b)));
    let mut taken: Vec<Vec<bool>> = images.iter().map(|(ov, _)| vec![false; ov.gt_area.len()]).collect();
    order
        .into_iter()
        .map(|(im, p)| {
            let ov = &images[im].0;
            let mut best: Option<(usize, f64)> = None;
            for g in (0..ov.gt_area.len()).filter(|&g| !taken[im][g]) {
                let iou = ov.iou(g, p);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[im][g] = true;
            }
            best.is_some()
        })
        .collect()
}

/// Area under the 101-point interpolated precision/recall curve.
fn interpolated_ap(hits: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100 {
        let level = f64::from(r) / 100.0;
        while k < recall.len() && recall[k] < level {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

fn pooled_map(pairs: &[(&InstanceSet, &InstanceSet)], thresholds: &[f64]) -> Result<Option<f64>> {
    if thresholds.is_empty() {
        return Err(Error::Invalid("no IoU thresholds".into()));
    }
    let mut images = Vec::with_capacity(pairs.len());
    for (pred, gt) in pairs {
        check_dims(pred, gt)?;
        images.push((
            Overlaps::new(pred, gt),
            pred.instances.iter().map(|i| i.score).collect::<Vec<_>>(),
        ));
    }
    let n_gt: usize = pairs.iter().map(|(_, gt)| gt.len()).sum();
    if n_gt == 0 {
        return Ok(None);
    }
    let total: f64 = thresholds
        .iter()
        .map(|&t| interpolated_ap(&match_at(&images, t), n_gt))
        .sum();
    Ok(Some(total / thresholds.len() as f64))
}

/// Mean over `thresholds` of mask AP for one image and one class. `None`
/// when there is no ground truth.
pub fn mean_ap(pred: &InstanceSet, gt: &InstanceSet, thresholds: &[f64]) -> Result<Option<f64>> {
    pooled_map(&[(pred, gt)], thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aji_cyto: f64,
    pub aji_nuc: f64,
    pub aji_avg: f64,
    /// Absent when the set has no instance of the class.
    pub map_cyto: Option<f64>,
    pub map_nuc: Option<f64>,
    pub map_avg: Option<f64>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "aji_cyto,aji_nuc,aji_avg,map_cyto,map_nuc,map_avg";

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{:.6},{:.6},{:.6},{},{},{}",
            self.aji_cyto,
            self.aji_nuc,
            self.aji_avg,
            opt(self.map_cyto),
            opt(self.map_nuc),
            opt(self.map_avg)
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Fields in CSV order; absent values as `None`.
    pub fn values(&self) -> [Option<f64>; 6] {
        [
            Some(self.aji_cyto),
            Some(self.aji_nuc),
            Some(self.aji_avg),
            self.map_cyto,
            self.map_nuc,
            self.map_avg,
        ]
    }
}

fn mean_present(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        (a, b) => a.or(b),
    }
}

/// Pooled per-class metrics over aligned prediction and ground-truth lists.
pub fn evaluate(preds: &[InstanceSet], gts: &[InstanceSet]) -> Result<MetricReport> {
    evaluate_with(preds, gts, &coco_thresholds())
}

pub fn evaluate_with(preds: &[InstanceSet], gts: &[InstanceSet], thresholds: &[f64]) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} prediction sets for {} ground-truth sets",
            preds.len(),
            gts.len()
        )));
    }
    let mut aji = [0.0; 2];
    let mut map = [None; 2];
    for (slot, class) in ClassId::ALL.into_iter().enumerate() {
        let p: Vec<InstanceSet> = preds.iter().map(|s| s.of_class(class)).collect();
        let g: Vec<InstanceSet> = gts.iter().map(|s| s.of_class(class)).collect();
        let (mut inter, mut union) = (0, 0);
        for (ps, gs) in p.iter().zip(&g) {
            let (i, u) = aji_counts(ps, gs)?;
            inter += i;
            union += u;
        }
        aji[slot] = aji_ratio(inter, union);
        let pairs: Vec<(&InstanceSet, &InstanceSet)> = p.iter().zip(&g).collect();
        map[slot] = pooled_map(&pairs, thresholds)?;
    }
    Ok(MetricReport {
        aji_cyto: aji[0],
        aji_nuc: aji[1],
        aji_avg: 0.5 * (aji[0] + aji[1]),
        map_cyto: map[0],
        map_nuc: map[1],
        map_avg: mean_present(map[0], map[1]),
    })
}
