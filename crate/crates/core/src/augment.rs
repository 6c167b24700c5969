//! Stochastic photometric and geometric augmentation with fully recorded
//! parameters. Colour jitter and erasing never move pixels, so only the
//! horizontal flip has to be carried over to box and mask coordinates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;
use crate::mask::Mask;
use crate::rng::{derive_seed, rng_from_seed};
use crate::synth::Range;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub brightness: Range<f64>,
    pub contrast: Range<f64>,
    /// Hue rotation in degrees.
    pub hue: Range<f64>,
    pub erase_prob: f64,
    /// Fraction of the image area covered by an erased box.
    pub erase_area: Range<f64>,
    /// Height / width ratio of an erased box.
    pub erase_aspect: Range<f64>,
    pub flip_prob: f64,
    pub teacher_views: usize,
    pub student_views: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness: Range::new(-0.15, 0.15),
            contrast: Range::new(0.8, 1.25),
            hue: Range::new(-18.0, 18.0),
            erase_prob: 0.5,
            erase_area: Range::new(0.02, 0.2),
            erase_aspect: Range::new(0.3, 3.3),
            flip_prob: 0.5,
            teacher_views: 4,
            student_views: 2,
        }
    }
}

impl AugmentConfig {
    /// A config whose every draw is the identity transform.
    pub fn identity() -> Self {
        AugmentConfig {
            brightness: Range::new(0.0, 0.0),
            contrast: Range::new(1.0, 1.0),
            hue: Range::new(0.0, 0.0),
            erase_prob: 0.0,
            flip_prob: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.teacher_views < 2 {
            return bad("at least two teacher views are required");
        }
        if self.student_views < 1 {
            return bad("at least one student view is required");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..=1.0).contains(&self.erase_prob) {
            return bad("probabilities must lie in [0,1]");
        }
        if self.contrast.min <= 0.0 {
            return bad("contrast factors must be positive");
        }
        if !(0.02 <= self.erase_area.min && self.erase_area.min <= self.erase_area.max && self.erase_area.max <= 0.2) {
            return bad("erase area must lie within [0.02, 0.2]");
        }
        if self.erase_aspect.min <= 0.0 {
            return bad("erase aspect ratios must be positive");
        }
        for r in [self.brightness, self.contrast, self.hue, self.erase_aspect] {
            if r.min > r.max {
                return bad("range min exceeds max");
            }
        }
        Ok(())
    }
}

fn draw(r: Range<f64>, rng: &mut impl Rng) -> f64 {
    if r.max > r.min {
        rng.gen_range(r.min..=r.max)
    } else {
        r.min
    }
}

/// Integer pixel box `[x0, x1) × [y0, y1)` filled with noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EraseBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl EraseBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub brightness_delta: f64,
    pub contrast_factor: f64,
    pub hue_shift: f64,
    pub erase_box: Option<EraseBox>,
    /// Seeds the noise written into the erased box.
    pub erase_seed: u64,
    pub flipped: bool,
}

impl TransformRecord {
    pub fn identity() -> Self {
        TransformRecord {
            brightness_delta: 0.0,
            contrast_factor: 1.0,
            hue_shift: 0.0,
            erase_box: None,
            erase_seed: 0,
            flipped: false,
        }
    }

    pub fn flip_only() -> Self {
        TransformRecord {
            flipped: true,
            ..TransformRecord::identity()
        }
    }

    /// The geometric part of this record alone.
    pub fn geometric(&self) -> TransformRecord {
        TransformRecord {
            flipped: self.flipped,
            ..TransformRecord::identity()
        }
    }

    pub fn is_identity(&self) -> bool {
        *self
            == TransformRecord {
                erase_seed: self.erase_seed,
                ..TransformRecord::identity()
            }
    }
}

pub fn sample_transform(seed: u64, config: &AugmentConfig, height: usize, width: usize) -> TransformRecord {
    let mut rng = rng_from_seed(seed);
    let brightness_delta = draw(config.brightness, &mut rng);
    let contrast_factor = draw(config.contrast, &mut rng);
    let hue_shift = draw(config.hue, &mut rng);
    let erase_seed: u64 = rng.gen();
    let erase_box = if config.erase_prob > 0.0 && rng.gen_bool(config.erase_prob) {
        sample_erase_box(&mut rng, config, height, width)
    } else {
        None
    };
    let flipped = config.flip_prob > 0.0 && rng.gen_bool(config.flip_prob);
    TransformRecord {
        brightness_delta,
        contrast_factor,
        hue_shift,
        erase_box,
        erase_seed,
        flipped,
    }
}

fn sample_erase_box(rng: &mut impl Rng, config: &AugmentConfig, height: usize, width: usize) -> Option<EraseBox> {
    let total = (height * width) as f64;
    for _ in 0..10 {
        let target = draw(config.erase_area, rng) * total;
        let aspect = draw(config.erase_aspect, rng);
        let bh = (target * aspect).sqrt().round() as usize;
        let bw = (target / aspect).sqrt().round() as usize;
        if bh == 0 || bw == 0 || bh > height || bw > width {
            continue;
        }
        let frac = (bh * bw) as f64 / total;
        if !(config.erase_area.min..=config.erase_area.max).contains(&frac) {
            continue;
        }
        let y0 = rng.gen_range(0..=height - bh);
        let x0 = rng.gen_range(0..=width - bw);
        return Some(EraseBox {
            x0,
            y0,
            x1: x0 + bw,
            y1: y0 + bh,
        });
    }
    None
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> Option<[f64; 3]> {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 {
        return None;
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    Some([h * 60.0, delta / max, max])
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Rotates the hue of one pixel; gray pixels have no hue and pass through.
pub fn shift_hue(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    match rgb_to_hsv(rgb) {
        Some([h, s, v]) => hsv_to_rgb([(h + degrees).rem_euclid(360.0), s, v]),
        None => rgb,
    }
}

fn color_pixel(mut p: [f64; 3], rec: &TransformRecord) -> [f64; 3] {
    if rec.brightness_delta != 0.0 {
        for v in &mut p {
            *v += rec.brightness_delta;
        }
    }
    if rec.contrast_factor != 1.0 {
        for v in &mut p {
            *v = (*v - 0.5) * rec.contrast_factor + 0.5;
        }
    }
    if rec.hue_shift != 0.0 {
        p = shift_hue(p, rec.hue_shift);
    }
    p
}

/// Colour jitter, then erasing, then the flip; clamps to `[0,1]`.
pub fn apply(image: &Image, rec: &TransformRecord) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(y, x, color_pixel(image.pixel(y, x), rec));
        }
    }
    if let Some(eb) = rec.erase_box {
        let mut rng = rng_from_seed(rec.erase_seed);
        for y in eb.y0..eb.y1.min(h) {
            for x in eb.x0..eb.x1.min(w) {
                out.set_pixel(y, x, [rng.gen(), rng.gen(), rng.gen()]);
            }
        }
    }
    if rec.flipped {
        out = out.flip_horizontal();
    }
    for v in out.as_mut_slice() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Carries boxes from original-image coordinates into the view described by
/// `rec`.
pub fn map_boxes(rec: &TransformRecord, boxes: &[BBox], width: usize, height: usize) -> Result<Vec<BBox>> {
    boxes
        .iter()
        .map(|b| {
            if !b.inside(width, height) {
                return Err(Error::Invalid(format!(
                    "box {:?} lies outside the {}x{} image",
                    b.to_array(),
                    width,
                    height
                )));
            }
            Ok(if rec.flipped { b.flip_horizontal(width) } else { *b })
        })
        .collect()
}

pub fn map_mask(rec: &TransformRecord, mask: &Mask) -> Mask {
    if rec.flipped {
        mask.flip_horizontal()
    } else {
        mask.clone()
    }
}

#[derive(Debug, Clone)]
pub struct View {
    pub image: Image,
    pub record: TransformRecord,
}

#[derive(Debug, Clone)]
pub struct ViewSet {
    pub teacher_views: Vec<View>,
    pub student_views: Vec<View>,
    pub source_id: String,
}

const TEACHER_ROLE: u64 = 0x7EAC;
const STUDENT_ROLE: u64 = 0x57D7;

/// Draws `K` teacher and `L` student views of one image from independent
/// sub-streams of `seed`.
pub fn make_views(image: &Image, source_id: &str, seed: u64, config: &AugmentConfig) -> Result<ViewSet> {
    config.validate()?;
    let (h, w) = (image.height(), image.width());
    let view = |role: u64, i: usize| {
        let record = sample_transform(derive_seed(seed, &[role, i as u64]), config, h, w);
        View {
            image: apply(image, &record),
            record,
        }
    };
    Ok(ViewSet {
        teacher_views: (0..config.teacher_views).map(|k| view(TEACHER_ROLE, k)).collect(),
        student_views: (0..config.student_views).map(|l| view(STUDENT_ROLE, l)).collect(),
        source_id: source_id.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = stream(seed, &[]);
        Image::from_vec(h, w, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn degenerate_config_samples_identity() {
        let rec = sample_transform(5, &AugmentConfig::identity(), 96, 96);
        assert!(rec.is_identity());
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = AugmentConfig::default();
        assert_eq!(sample_transform(11, &cfg, 96, 96), sample_transform(11, &cfg, 96, 96));
    }

    #[test]
    fn flip_rate_is_near_half() {
        let cfg = AugmentConfig::default();
        let flips = (0..10_000u64)
            .filter(|&s| sample_transform(s, &cfg, 96, 96).flipped)
            .count();
        let rate = flips as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&rate), "flip rate {rate}");
    }

    #[test]
    fn erase_boxes_respect_area_bounds() {
        let cfg = AugmentConfig {
            erase_prob: 1.0,
            ..AugmentConfig::default()
        };
        for s in 0..500 {
            let rec = sample_transform(s, &cfg, 96, 80);
            if let Some(eb) = rec.erase_box {
                assert!(eb.x1 <= 80 && eb.y1 <= 96 && eb.x0 < eb.x1 && eb.y0 < eb.y1);
                let frac = eb.area() as f64 / (96.0 * 80.0);
                assert!((0.02..=0.2).contains(&frac), "{frac}");
            }
        }
    }

    #[test]
    fn identity_record_leaves_image_unchanged() {
        let img = random_image(1, 12, 9);
        assert_eq!(apply(&img, &TransformRecord::identity()), img);
    }

    #[test]
    fn flip_applied_twice_restores_image() {
        let img = random_image(2, 10, 7);
        let rec = TransformRecord::flip_only();
        assert_eq!(apply(&apply(&img, &rec), &rec), img);
    }

    #[test]
    fn brightness_shift_on_constant_image() {
        let img = Image::filled(8, 8, 0.5);
        let rec = TransformRecord {
            brightness_delta: 0.2,
            ..TransformRecord::identity()
        };
        assert!(apply(&img, &rec).as_slice().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn hue_rotation_of_pure_red() {
        let p = shift_hue([1.0, 0.0, 0.0], 120.0);
        assert!((p[0] - 0.0).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && p[2].abs() < 1e-12);
        assert_eq!(shift_hue([0.3, 0.3, 0.3], 45.0), [0.3, 0.3, 0.3]);
        let back = shift_hue(shift_hue([0.2, 0.5, 0.9], 300.0), 60.0);
        assert!((back[0] - 0.2).abs() < 1e-12 && (back[1] - 0.5).abs() < 1e-12 && (back[2] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn box_mapping() {
        let flip = TransformRecord::flip_only();
        let b = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(map_boxes(&TransformRecord::identity(), &b, 96, 96).unwrap(), b.to_vec());
        assert_eq!(
            map_boxes(&flip, &b, 96, 96).unwrap(),
            vec![BBox::new(86.0, 0.0, 96.0, 10.0)]
        );
        let once = map_boxes(&flip, &b, 96, 96).unwrap();
        assert_eq!(map_boxes(&flip, &once, 96, 96).unwrap(), b.to_vec());
        assert!(map_boxes(&flip, &[BBox::new(90.0, 0.0, 100.0, 5.0)], 96, 96).is_err());
    }

    #[test]
    fn view_counts() {
        let img = random_image(3, 32, 32);
        let vs = make_views(&img, "u00000", 9, &AugmentConfig::default()).unwrap();
        assert_eq!(vs.teacher_views.len(), 4);
        assert_eq!(vs.student_views.len(), 2);
        assert!(vs
            .teacher_views
            .iter()
            .chain(&vs.student_views)
            .all(|v| v.image.height() == 32 && v.image.in_unit_range()));
    }

    proptest! {
        #[test]
        fn colour_commutes_with_flip(seed in any::<u64>(), img_seed in any::<u64>()) {
            let img = random_image(img_seed, 9, 11);
            let mut rec = sample_transform(seed, &AugmentConfig::default(), 9, 11);
            rec.erase_box = None;
            rec.flipped = false;
            let a = apply(&img, &rec).flip_horizontal();
            let b = apply(&img.flip_horizontal(), &rec);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn mask_flip_roundtrip(bits in proptest::collection::vec(any::<bool>(), 48)) {
            let m = Mask::from_vec(6, 8, bits).unwrap();
            let rec = TransformRecord::flip_only();
            prop_assert_eq!(map_mask(&rec, &map_mask(&rec, &m)), m);
        }

        #[test]
        fn apply_is_deterministic(seed in any::<u64>()) {
            let img = random_image(seed ^ 1, 10, 10);
            let rec = sample_transform(seed, &AugmentConfig { erase_prob: 1.0, ..AugmentConfig::default() }, 10, 10);
            prop_assert_eq!(apply(&img, &rec), apply(&img, &rec));
        }
    }
}
