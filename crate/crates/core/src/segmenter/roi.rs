use crate::error::{Error, Result};
use crate::geometry::BBox;

use super::{FeaturePyramid, Segmenter, StageGeometry};

/// Precomputed bilinear taps for one box: for every stage and every one of
/// the `r×r` bins, four spatial indices and their weights. The sample point
/// of a bin is its centre; a stage cell `(i, j)` is centred at image point
/// `((j + 0.5)·s, (i + 0.5)·s)`. Points are clamped to the stage extent.
#[derive(Debug, Clone)]
pub struct RoiSampler {
    roi_size: usize,
    /// `[stage][bin] -> [(index, weight); 4]`
    taps: Vec<Vec<[(usize, f64); 4]>>,
}

fn axis_taps(coord: f64, len: usize) -> (usize, usize, f64) {
    let c = coord.clamp(0.0, (len - 1) as f64);
    let lo = (c.floor() as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    (lo, hi, c - lo as f64)
}

impl RoiSampler {
    pub fn new(bbox: &BBox, roi_size: usize, stages: &[(usize, usize, usize)]) -> Result<RoiSampler> {
        if !bbox.has_positive_area() {
            return Err(Error::Invalid(format!("degenerate RoI box {:?}", bbox.to_array())));
        }
        let r = roi_size as f64;
        let (bw, bh) = (bbox.width(), bbox.height());
        let taps = stages
            .iter()
            .map(|&(h, w, stride)| {
                let s = stride as f64;
                let mut bins = Vec::with_capacity(roi_size * roi_size);
                for u in 0..roi_size {
                    let y = bbox.y0 + (u as f64 + 0.5) * bh / r;
                    let (y0, y1, ly) = axis_taps(y / s - 0.5, h);
                    for v in 0..roi_size {
                        let x = bbox.x0 + (v as f64 + 0.5) * bw / r;
                        let (x0, x1, lx) = axis_taps(x / s - 0.5, w);
                        bins.push([
                            (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
                            (y0 * w + x1, (1.0 - ly) * lx),
                            (y1 * w + x0, ly * (1.0 - lx)),
                            (y1 * w + x1, ly * lx),
                        ]);
                    }
                }
                bins
            })
            .collect();
        Ok(RoiSampler { roi_size, taps })
    }

    pub fn for_geometry(bbox: &BBox, roi_size: usize, geometry: &[StageGeometry]) -> Result<RoiSampler> {
        let dims: Vec<_> = geometry.iter().map(|g| (g.height, g.width, g.stride)).collect();
        RoiSampler::new(bbox, roi_size, &dims)
    }

    /// Patch layout: channel-major over the concatenated stage channels, then
    /// bin row, then bin column.
    pub fn extract(&self, pyramid: &FeaturePyramid) -> Vec<f64> {
        let bins = self.roi_size * self.roi_size;
        let mut out = Vec::with_capacity(pyramid.total_channels() * bins);
        for (stage, taps) in pyramid.stages.iter().zip(&self.taps) {
            let plane = stage.height * stage.width;
            for c in 0..stage.channels {
                let src = &stage.data[c * plane..(c + 1) * plane];
                out.extend(taps.iter().map(|t| t.iter().map(|&(i, w)| w * src[i]).sum::<f64>()));
            }
        }
        out
    }

    pub fn backward(&self, dpatch: &[f64], d_stages: &mut FeaturePyramid) {
        let bins = self.roi_size * self.roi_size;
        let mut k = 0;
        for (stage, taps) in d_stages.stages.iter_mut().zip(&self.taps) {
            let plane = stage.height * stage.width;
            for c in 0..stage.channels {
                let dst = &mut stage.data[c * plane..(c + 1) * plane];
                for (b, t) in taps.iter().enumerate() {
                    let d = dpatch[k + b];
                    if d != 0.0 {
                        for &(i, w) in t {
                            dst[i] += w * d;
                        }
                    }
                }
                k += bins;
            }
        }
    }
}

impl Segmenter {
    pub fn roi_sampler(&self, bbox: &BBox) -> Result<RoiSampler> {
        RoiSampler::for_geometry(bbox, self.config.roi_size, &self.geometry)
    }

    /// Fixed-size bilinear feature patch for one box.
    pub fn roi_extract(&self, pyramid: &FeaturePyramid, bbox: &BBox) -> Result<Vec<f64>> {
        Ok(self.roi_sampler(bbox)?.extract(pyramid))
    }
}
