use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

use super::{FeatureMap, FeaturePyramid, ParameterVector, Segmenter, StageGeometry};

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BackboneCache {
    pub input: Vec<f64>,
    pub pyramid: FeaturePyramid,
}

/// Output positions `o` with `0 <= o*stride + k - pad < in_len`, as `[lo, hi)`.
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad > k {
        ((in_len + pad - k).div_ceil(stride)).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_forward(input: &[f64], g: &StageGeometry, w: &[f64], b: &[f64], out: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.conv_stride, g.padding);
    let in_plane = g.in_height * g.in_width;
    let out_plane = g.height * g.width;
    for co in 0..g.channels {
        let o = &mut out[co * out_plane..(co + 1) * out_plane];
        o.fill(b[co]);
        for ci in 0..g.in_channels {
            let inp = &input[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(ky, p, s, g.in_height, g.height);
                for kx in 0..k {
                    let wv = w[((co * g.in_channels + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_range(kx, p, s, g.in_width, g.width);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let in_row = &inp[iy * g.in_width..(iy + 1) * g.in_width];
                        let out_row = &mut o[oy * g.width..(oy + 1) * g.width];
                        for ox in ox_lo..ox_hi {
                            out_row[ox] += wv * in_row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight, bias and (optionally) input gradients of one
/// convolution given the gradient `dpre` of its pre-activation output.
fn conv_backward(
    input: &[f64],
    g: &StageGeometry,
    w: &[f64],
    dpre: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let (k, s, p) = (g.kernel, g.conv_stride, g.padding);
    let in_plane = g.in_height * g.in_width;
    let out_plane = g.height * g.width;
    for co in 0..g.channels {
        let d = &dpre[co * out_plane..(co + 1) * out_plane];
        db[co] += d.iter().sum::<f64>();
        for ci in 0..g.in_channels {
            let inp = &input[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(ky, p, s, g.in_height, g.height);
                for kx in 0..k {
                    let widx = ((co * g.in_channels + ci) * k + ky) * k + kx;
                    let (ox_lo, ox_hi) = valid_range(kx, p, s, g.in_width, g.width);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let in_row = &inp[iy * g.in_width..(iy + 1) * g.in_width];
                        let d_row = &d[oy * g.width..(oy + 1) * g.width];
                        for ox in ox_lo..ox_hi {
                            acc += d_row[ox] * in_row[ox * s + kx - p];
                        }
                    }
                    dw[widx] += acc;
                    if let Some(di) = dinput.as_deref_mut() {
                        let wv = w[widx];
                        let dplane = &mut di[ci * in_plane..(ci + 1) * in_plane];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let d_row = &d[oy * g.width..(oy + 1) * g.width];
                            let drow = &mut dplane[iy * g.in_width..(iy + 1) * g.in_width];
                            for ox in ox_lo..ox_hi {
                                drow[ox * s + kx - p] += wv * d_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Segmenter {
    pub(crate) fn image_to_planar(&self, image: &Image) -> Result<Vec<f64>> {
        if image.height() != self.config.height || image.width() != self.config.width {
            return Err(Error::Shape(format!(
                "image is {}x{}, model expects {}x{}",
                image.height(),
                image.width(),
                self.config.height,
                self.config.width
            )));
        }
        let (h, w) = (image.height(), image.width());
        let src = image.as_slice();
        let mut out = vec![0.0; CHANNELS * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    out[(c * h + y) * w + x] = src[(y * w + x) * CHANNELS + c];
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn backbone_forward(&self, params: &ParameterVector, image: &Image) -> Result<BackboneCache> {
        self.check_params(params)?;
        let input = self.image_to_planar(image)?;
        let pv = params.values();
        let mut stages: Vec<FeatureMap> = Vec::with_capacity(self.geometry.len());
        for (t, g) in self.geometry.iter().enumerate() {
            let wlen = g.channels * g.in_channels * g.kernel * g.kernel;
            let w = &pv[self.offsets.stage_w[t]..self.offsets.stage_w[t] + wlen];
            let b = &pv[self.offsets.stage_b[t]..self.offsets.stage_b[t] + g.channels];
            let mut map = FeatureMap::zeros(g.channels, g.height, g.width, g.stride);
            let src = if t == 0 { &input[..] } else { &stages[t - 1].data[..] };
            conv_forward(src, g, w, b, &mut map.data);
            for v in &mut map.data {
                *v = v.tanh();
            }
            stages.push(map);
        }
        Ok(BackboneCache {
            input,
            pyramid: FeaturePyramid { stages },
        })
    }

    /// Backpropagates `d_stages` (gradients with respect to each stage's
    /// output) through the extractor. `d_stages` is consumed as scratch.
    pub(crate) fn backbone_backward(
        &self,
        params: &ParameterVector,
        cache: &BackboneCache,
        d_stages: &mut FeaturePyramid,
        grad: &mut [f64],
    ) {
        let pv = params.values();
        for t in (0..self.geometry.len()).rev() {
            let g = &self.geometry[t];
            let out = &cache.pyramid.stages[t].data;
            let dpre: Vec<f64> = d_stages.stages[t]
                .data
                .iter()
                .zip(out)
                .map(|(d, a)| d * (1.0 - a * a))
                .collect();
            if dpre.iter().all(|&v| v == 0.0) {
                continue;
            }
            let wlen = g.channels * g.in_channels * g.kernel * g.kernel;
            let (wo, bo) = (self.offsets.stage_w[t], self.offsets.stage_b[t]);
            let w = &pv[wo..wo + wlen];
            let (input, dinput) = if t == 0 {
                (&cache.input[..], None)
            } else {
                let (lower, _) = d_stages.stages.split_at_mut(t);
                (&cache.pyramid.stages[t - 1].data[..], Some(&mut lower[t - 1].data[..]))
            };
            let (gw, rest) = grad.split_at_mut(bo);
            conv_backward(
                input,
                g,
                w,
                &dpre,
                &mut gw[wo..wo + wlen],
                &mut rest[..g.channels],
                dinput,
            );
        }
    }

    pub fn extract_features(&self, params: &ParameterVector, image: &Image) -> Result<FeaturePyramid> {
        Ok(self.backbone_forward(params, image)?.pyramid)
    }
}

#[cfg(test)]
mod tests {
    use super::super::SegmenterConfig;
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn random_image(seed: u64, cfg: &SegmenterConfig) -> Image {
        let mut rng = stream(seed, &[]);
        Image::from_vec(
            cfg.height,
            cfg.width,
            (0..cfg.height * cfg.width * 3).map(|_| rng.gen()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_everything_gives_zero_pyramid() {
        let m = Segmenter::new(SegmenterConfig::default()).unwrap();
        let pyr = m
            .extract_features(&m.zero_params(), &Image::filled(96, 96, 0.0))
            .unwrap();
        assert!(pyr.stages.iter().all(|s| s.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stage_shapes_follow_strides() {
        let m = Segmenter::new(SegmenterConfig::default()).unwrap();
        let pyr = m
            .extract_features(&m.init_params(0), &random_image(1, m.config()))
            .unwrap();
        let shapes: Vec<_> = pyr
            .stages
            .iter()
            .map(|s| (s.channels, s.height, s.width, s.stride))
            .collect();
        assert_eq!(shapes, vec![(8, 24, 24, 4), (16, 12, 12, 8)]);
    }

    #[test]
    fn features_are_deterministic() {
        let m = Segmenter::new(SegmenterConfig::default()).unwrap();
        let p = m.init_params(3);
        let img = random_image(4, m.config());
        assert_eq!(
            m.extract_features(&p, &img).unwrap(),
            m.extract_features(&p, &img).unwrap()
        );
    }

    #[test]
    fn rejects_wrong_image_size() {
        let m = Segmenter::new(SegmenterConfig::default()).unwrap();
        assert!(m
            .extract_features(&m.zero_params(), &Image::filled(64, 64, 0.0))
            .is_err());
    }

    #[test]
    fn conv_matches_naive_definition() {
        let m = Segmenter::new(SegmenterConfig {
            height: 32,
            width: 32,
            ..SegmenterConfig::default()
        })
        .unwrap();
        let p = m.init_params(5);
        let img = random_image(6, m.config());
        let cache = m.backbone_forward(&p, &img).unwrap();
        let g = &m.geometry()[0];
        let w = p.segment("stage0.weight");
        let b = p.segment("stage0.bias");
        let (co, oy, ox) = (3, 0, 5);
        let mut pre = b[co];
        for ci in 0..3 {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let iy = (oy * g.conv_stride + ky) as isize - g.padding as isize;
                    let ix = (ox * g.conv_stride + kx) as isize - g.padding as isize;
                    if iy < 0 || ix < 0 || iy >= 32 || ix >= 32 {
                        continue;
                    }
                    pre += w[((co * 3 + ci) * g.kernel + ky) * g.kernel + kx] * img.pixel(iy as usize, ix as usize)[ci];
                }
            }
        }
        assert!((cache.pyramid.stages[0].at(co, oy, ox) - pre.tanh()).abs() < 1e-12);
    }
}
