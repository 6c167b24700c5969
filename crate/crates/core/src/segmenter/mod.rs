//! A small two-stage instance segmenter with hand-written gradients.
//!
//! The model keeps the usual four-part shape: a strided convolutional
//! feature extractor producing a pyramid of `T` stages, an anchor-scoring
//! proposal generator, a detection branch (classification and box revision)
//! and a mask branch, both fed by bilinear RoI sampling from every stage.
//! Per-stage 1×1 adaptation layers halve the channel count for feature
//! distillation.
//!
//! All computation is `f64`. Every forward routine is a pure function of the
//! parameter vector and its inputs; backward routines accumulate into a flat
//! gradient buffer with the same layout as the parameters.

mod adapt;
mod backbone;
mod heads;
mod infer;
mod loss;
pub mod params;
mod proposals;
mod roi;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::rng_from_seed;

pub use adapt::adapt_stage;
pub(crate) use heads::HeadGrad;
pub use heads::{softmax, ClassDistribution, HeadOutput};
pub use infer::{paste_mask, Detection};
pub use loss::{decode_box, encode_box, LossWeights, RoiTarget, SupervisedLoss, SupervisedOutputs, SupervisedTargets};
pub use params::{Layout, ParameterVector};
pub use proposals::ProposalBatch;
pub use roi::RoiSampler;

/// Background, cytoplasm, nucleus.
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub kernel: usize,
    /// Stride of this stage's convolution relative to its input.
    pub stride: usize,
    pub padding: usize,
    /// Side length of the square anchor scored at every cell of this stage.
    pub anchor_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub height: usize,
    pub width: usize,
    pub stages: Vec<StageConfig>,
    pub roi_size: usize,
    pub hidden: usize,
    pub mask_size: usize,
    /// Proposals kept after suppression.
    pub proposals: usize,
    pub rpn_nms_iou: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
    /// Background RoIs sampled per foreground RoI in the supervised loss.
    pub bg_per_fg: usize,
    pub min_bg: usize,
    pub box_weights: [f64; 4],
    pub score_threshold: f64,
    pub detection_nms_iou: f64,
    pub max_detections: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            height: 96,
            width: 96,
            stages: vec![
                StageConfig {
                    channels: 8,
                    kernel: 8,
                    stride: 4,
                    padding: 2,
                    anchor_size: 10.0,
                },
                StageConfig {
                    channels: 16,
                    kernel: 6,
                    stride: 2,
                    padding: 2,
                    anchor_size: 26.0,
                },
            ],
            roi_size: 7,
            hidden: 64,
            mask_size: 14,
            proposals: 64,
            rpn_nms_iou: 0.7,
            rpn_pos_iou: 0.5,
            rpn_neg_iou: 0.3,
            fg_iou: 0.5,
            bg_iou: 0.3,
            bg_per_fg: 3,
            min_bg: 8,
            box_weights: [10.0, 10.0, 5.0, 5.0],
            score_threshold: 0.5,
            detection_nms_iou: 0.5,
            max_detections: 32,
        }
    }
}

/// Resolved shape of one pyramid stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub conv_stride: usize,
    pub padding: usize,
    /// Downsampling factor relative to the input image.
    pub stride: usize,
}

/// One `C×H×W` feature map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize, stride: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            stride,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Mirrors the map horizontally.
    pub fn flip_horizontal(&self) -> FeatureMap {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                for x in 0..self.width {
                    out.data[row + x] = self.data[row + self.width - 1 - x];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub stages: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn strides(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.stride).collect()
    }

    pub fn total_channels(&self) -> usize {
        self.stages.iter().map(|s| s.channels).sum()
    }

    pub fn zeros_like(&self) -> FeaturePyramid {
        FeaturePyramid {
            stages: self
                .stages
                .iter()
                .map(|s| FeatureMap::zeros(s.channels, s.height, s.width, s.stride))
                .collect(),
        }
    }
}

/// Cached parameter offsets, resolved once from the layout.
#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub stage_w: Vec<usize>,
    pub stage_b: Vec<usize>,
    pub rpn_w: Vec<usize>,
    pub rpn_b: Vec<usize>,
    pub adapt_w: Vec<usize>,
    pub hid_w: usize,
    pub hid_b: usize,
    pub cls_w: usize,
    pub cls_b: usize,
    pub box_w: usize,
    pub box_b: usize,
    pub mask_w: usize,
    pub mask_b: usize,
}

/// Model definition: configuration, derived geometry, anchors and the
/// parameter layout. Holds no parameters itself, so one instance serves both
/// student and teacher.
#[derive(Debug, Clone)]
pub struct Segmenter {
    config: SegmenterConfig,
    geometry: Vec<StageGeometry>,
    layout: Arc<Layout>,
    offsets: Offsets,
    anchors: Vec<BBox>,
}

impl Segmenter {
    pub fn new(config: SegmenterConfig) -> Result<Segmenter> {
        let bad = |m: String| Err(Error::Config(m));
        if config.stages.is_empty() {
            return bad("at least one pyramid stage is required".into());
        }
        if config.roi_size == 0 || config.mask_size == 0 || config.hidden == 0 || config.proposals == 0 {
            return bad("roi_size, mask_size, hidden and proposals must be positive".into());
        }
        let mut geometry = Vec::with_capacity(config.stages.len());
        let (mut in_c, mut in_h, mut in_w, mut total) = (crate::image::CHANNELS, config.height, config.width, 1);
        for (t, st) in config.stages.iter().enumerate() {
            if st.channels == 0 || st.channels % 2 != 0 {
                return bad(format!(
                    "stage {t} channel count {} must be even and positive",
                    st.channels
                ));
            }
            if st.stride == 0
                || st.kernel == 0
                || in_h + 2 * st.padding < st.kernel
                || in_w + 2 * st.padding < st.kernel
            {
                return bad(format!("stage {t} convolution does not fit its input"));
            }
            let out_h = (in_h + 2 * st.padding - st.kernel) / st.stride + 1;
            let out_w = (in_w + 2 * st.padding - st.kernel) / st.stride + 1;
            if in_h % st.stride != 0 || in_w % st.stride != 0 || out_h != in_h / st.stride || out_w != in_w / st.stride
            {
                return bad(format!(
                    "stage {t}: a {}x{} input does not downsample exactly by stride {}",
                    in_h, in_w, st.stride
                ));
            }
            total *= st.stride;
            geometry.push(StageGeometry {
                in_channels: in_c,
                in_height: in_h,
                in_width: in_w,
                channels: st.channels,
                height: out_h,
                width: out_w,
                kernel: st.kernel,
                conv_stride: st.stride,
                padding: st.padding,
                stride: total,
            });
            (in_c, in_h, in_w) = (st.channels, out_h, out_w);
        }

        let mut layout = Layout::default();
        let mut stage_w = Vec::new();
        let mut stage_b = Vec::new();
        for (t, g) in geometry.iter().enumerate() {
            stage_w.push(layout.push(
                format!("stage{t}.weight"),
                &[g.channels, g.in_channels, g.kernel, g.kernel],
            ));
            stage_b.push(layout.push(format!("stage{t}.bias"), &[g.channels]));
        }
        let mut rpn_w = Vec::new();
        let mut rpn_b = Vec::new();
        for (t, g) in geometry.iter().enumerate() {
            rpn_w.push(layout.push(format!("rpn{t}.weight"), &[g.channels]));
            rpn_b.push(layout.push(format!("rpn{t}.bias"), &[1]));
        }
        let mut adapt_w = Vec::new();
        for (t, g) in geometry.iter().enumerate() {
            adapt_w.push(layout.push(format!("adapt{t}.weight"), &[g.channels / 2, g.channels]));
        }
        let patch = geometry.iter().map(|g| g.channels).sum::<usize>() * config.roi_size * config.roi_size;
        let hid_w = layout.push("head.hidden.weight", &[config.hidden, patch]);
        let hid_b = layout.push("head.hidden.bias", &[config.hidden]);
        let cls_w = layout.push("head.cls.weight", &[NUM_CLASSES, config.hidden]);
        let cls_b = layout.push("head.cls.bias", &[NUM_CLASSES]);
        let box_w = layout.push("head.box.weight", &[4, config.hidden]);
        let box_b = layout.push("head.box.bias", &[4]);
        let mm = config.mask_size * config.mask_size;
        let mask_w = layout.push("head.mask.weight", &[mm, config.hidden]);
        let mask_b = layout.push("head.mask.bias", &[mm]);

        let offsets = Offsets {
            stage_w,
            stage_b,
            rpn_w,
            rpn_b,
            adapt_w,
            hid_w,
            hid_b,
            cls_w,
            cls_b,
            box_w,
            box_b,
            mask_w,
            mask_b,
        };
        let anchors = proposals::build_anchors(&config, &geometry);
        Ok(Segmenter {
            config,
            geometry,
            layout: Arc::new(layout),
            offsets,
            anchors,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn geometry(&self) -> &[StageGeometry] {
        &self.geometry
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn patch_len(&self) -> usize {
        self.geometry.iter().map(|g| g.channels).sum::<usize>() * self.config.roi_size * self.config.roi_size
    }

    pub fn zero_params(&self) -> ParameterVector {
        ParameterVector::zeros(self.layout.clone())
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.layout.total_len()]
    }

    /// Deterministic initialisation: uniform weights scaled by fan-in, small
    /// output heads, zero biases.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut rng = rng_from_seed(seed);
        let mut p = self.zero_params();
        let segments = self.layout.segments().to_vec();
        for seg in segments {
            if seg.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = seg.shape[1..].iter().product::<usize>().max(1);
            let scale =
                if seg.name.starts_with("rpn") || seg.name == "head.cls.weight" || seg.name == "head.mask.weight" {
                    0.01
                } else if seg.name == "head.box.weight" {
                    0.001
                } else {
                    (3.0 / fan_in as f64).sqrt()
                };
            let vals = &mut p.values_mut()[seg.offset..seg.offset + seg.len];
            for v in vals {
                *v = rng.gen_range(-scale..=scale);
            }
        }
        p
    }

    pub(crate) fn check_params(&self, params: &ParameterVector) -> Result<()> {
        if **params.layout() != *self.layout {
            return Err(Error::Shape("parameter layout does not match the model".into()));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let m = Segmenter::new(SegmenterConfig::default()).unwrap();
        let g = m.geometry();
        assert_eq!((g[0].channels, g[0].height, g[0].width, g[0].stride), (8, 24, 24, 4));
        assert_eq!((g[1].channels, g[1].height, g[1].width, g[1].stride), (16, 12, 12, 8));
        assert_eq!(m.patch_len(), 24 * 49);
    }

    #[test]
    fn rejects_odd_channels_and_bad_strides() {
        let mut cfg = SegmenterConfig::default();
        cfg.stages[1].channels = 15;
        assert!(Segmenter::new(cfg).is_err());
        let cfg = SegmenterConfig {
            height: 90,
            ..SegmenterConfig::default()
        };
        assert!(Segmenter::new(cfg).is_err());
    }

    #[test]
    fn student_and_teacher_layouts_match() {
        let m = Segmenter::new(SegmenterConfig::default()).unwrap();
        let a = m.init_params(1);
        let b = m.init_params(2);
        assert!(a.same_layout(&b));
        assert_eq!(a.layout().segments(), b.layout().segments());
        assert!(a.all_finite());
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
