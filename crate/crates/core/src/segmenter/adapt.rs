use crate::error::{Error, Result};

use super::{dot, FeatureMap, FeaturePyramid, ParameterVector, Segmenter};

/// 1×1 channel-halving map of one stage. `weight` is `[C/2, C]`, row-major.
pub fn adapt_stage(weight: &[f64], stage: &FeatureMap) -> Result<FeatureMap> {
    let c = stage.channels;
    if !c.is_multiple_of(2) {
        return Err(Error::Shape(format!("cannot halve an odd channel count {c}")));
    }
    if weight.len() != c / 2 * c {
        return Err(Error::Shape(format!(
            "adaptation weight has {} values, expected {}",
            weight.len(),
            c / 2 * c
        )));
    }
    let plane = stage.height * stage.width;
    let mut out = FeatureMap::zeros(c / 2, stage.height, stage.width, stage.stride);
    for o in 0..c / 2 {
        let dst = &mut out.data[o * plane..(o + 1) * plane];
        for i in 0..c {
            let w = weight[o * c + i];
            if w == 0.0 {
                continue;
            }
            for (d, &s) in dst.iter_mut().zip(&stage.data[i * plane..(i + 1) * plane]) {
                *d += w * s;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`adapt_stage`]: accumulates into `d_weight` and `d_stage`.
pub(crate) fn adapt_stage_backward(
    weight: &[f64],
    stage: &FeatureMap,
    d_out: &FeatureMap,
    d_weight: &mut [f64],
    d_stage: &mut FeatureMap,
) {
    let c = stage.channels;
    let plane = stage.height * stage.width;
    for o in 0..c / 2 {
        let g = &d_out.data[o * plane..(o + 1) * plane];
        for i in 0..c {
            let src = &stage.data[i * plane..(i + 1) * plane];
            d_weight[o * c + i] += dot(g, src);
            let w = weight[o * c + i];
            for (d, &gv) in d_stage.data[i * plane..(i + 1) * plane].iter_mut().zip(g) {
                *d += w * gv;
            }
        }
    }
}

impl Segmenter {
    /// Applies every stage's adaptation layer.
    pub fn adapt(&self, params: &ParameterVector, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        self.check_params(params)?;
        if pyramid.stages.len() != self.geometry.len() {
            return Err(Error::Shape("pyramid stage count does not match the model".into()));
        }
        let pv = params.values();
        let stages = pyramid
            .stages
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let o = self.offsets.adapt_w[t];
                adapt_stage(&pv[o..o + s.channels / 2 * s.channels], s)
            })
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid { stages })
    }

    pub(crate) fn adapt_backward(
        &self,
        params: &ParameterVector,
        pyramid: &FeaturePyramid,
        d_adapted: &FeaturePyramid,
        grad: &mut [f64],
        d_stages: &mut FeaturePyramid,
    ) {
        let pv = params.values();
        for (t, s) in pyramid.stages.iter().enumerate() {
            let o = self.offsets.adapt_w[t];
            let len = s.channels / 2 * s.channels;
            adapt_stage_backward(
                &pv[o..o + len],
                s,
                &d_adapted.stages[t],
                &mut grad[o..o + len],
                &mut d_stages.stages[t],
            );
        }
    }
}
