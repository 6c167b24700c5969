//! Procedural scenes of overlapping translucent cells, and on-disk datasets
//! built from them.
//!
//! A scene is a light background with a smooth gradient, a number of
//! translucent elliptical cytoplasm regions that may overlap, and one opaque
//! nucleus inside each cytoplasm. Every scene is a pure function of its seed
//! and the generator config.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;
use crate::mask::{Mask, Rle};
use crate::rng::{derive_seed, rng_from_seed};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_FILE: &str = "image.bin";
pub const INSTANCES_FILE: &str = "instances.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassId {
    Cytoplasm = 1,
    Nucleus = 2,
}

impl ClassId {
    pub const ALL: [ClassId; 2] = [ClassId::Cytoplasm, ClassId::Nucleus];

    /// Index in the classifier output, where 0 is background.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ClassId> {
        match i {
            1 => Some(ClassId::Cytoplasm),
            2 => Some(ClassId::Nucleus),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub mask: Mask,
    pub class_id: ClassId,
    pub bbox: BBox,
}

impl Instance {
    /// Wraps a mask, computing its tight box. Fails on an empty mask.
    pub fn new(mask: Mask, class_id: ClassId) -> Result<Instance> {
        let bbox = mask
            .bbox()
            .ok_or_else(|| Error::Invalid("instance mask is empty".into()))?;
        Ok(Instance { mask, class_id, bbox })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    /// `None` for unlabeled scenes loaded from disk.
    pub instances: Option<Vec<Instance>>,
    pub seed: u64,
}

impl Scene {
    pub fn instances(&self) -> &[Instance] {
        self.instances.as_deref().unwrap_or(&[])
    }

    pub fn is_labeled(&self) -> bool {
        self.instances.is_some()
    }
}

/// Inclusive range of a sampled quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

impl<T> Range<T> {
    pub const fn new(min: T, max: T) -> Self {
        Range { min, max }
    }
}

impl Range<f64> {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub cell_count: Range<usize>,
    /// Semi-axis lengths of cytoplasm ellipses, in pixels.
    pub cytoplasm_axes: Range<f64>,
    /// Semi-axis lengths of nucleus ellipses, in pixels.
    pub nucleus_axes: Range<f64>,
    pub cytoplasm_opacity: Range<f64>,
    pub nucleus_opacity: Range<f64>,
    /// Probability that a new cell is placed against an existing one.
    pub overlap_prob: f64,
    /// Multiplies every cell's opacity; values below 1 wash cells out.
    pub contrast: f64,
    /// Peak-to-peak amplitude of the background gradient.
    pub gradient: f64,
    pub noise_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 96,
            width: 96,
            cell_count: Range::new(2, 4),
            cytoplasm_axes: Range::new(10.0, 16.0),
            nucleus_axes: Range::new(3.0, 5.0),
            cytoplasm_opacity: Range::new(0.35, 0.6),
            nucleus_opacity: Range::new(0.8, 0.95),
            overlap_prob: 0.4,
            contrast: 1.0,
            gradient: 0.08,
            noise_std: 0.02,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.height < 32 || self.width < 32 {
            return bad("image size must be at least 32x32");
        }
        if self.cell_count.min > self.cell_count.max {
            return bad("cell_count.min exceeds cell_count.max");
        }
        for (name, r) in [
            ("cytoplasm_axes", self.cytoplasm_axes),
            ("nucleus_axes", self.nucleus_axes),
        ] {
            if !(r.min >= 1.0 && r.max >= r.min && r.max.is_finite()) {
                return Err(Error::Config(format!("{name} must satisfy 1 <= min <= max")));
            }
        }
        if self.nucleus_axes.max > self.cytoplasm_axes.min {
            return bad("nucleus axes can exceed cytoplasm axes, containment is impossible");
        }
        for (name, r) in [
            ("cytoplasm_opacity", self.cytoplasm_opacity),
            ("nucleus_opacity", self.nucleus_opacity),
        ] {
            if !(0.0 <= r.min && r.min <= r.max && r.max <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in [0,1] with min <= max")));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return bad("overlap_prob must lie in [0,1]");
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return bad("contrast must lie in [0,1]");
        }
        if !(self.gradient >= 0.0 && self.noise_std >= 0.0) {
            return bad("gradient and noise_std must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (px - self.cx, py - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    fn rasterize(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |y, x| self.contains(x as f64 + 0.5, y as f64 + 0.5))
    }
}

fn blend(image: &mut Image, mask: &Mask, color: [f64; 3], alpha: f64) {
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(y, x) {
                let p = image.pixel(y, x);
                image.set_pixel(
                    y,
                    x,
                    [
                        (1.0 - alpha) * p[0] + alpha * color[0],
                        (1.0 - alpha) * p[1] + alpha * color[1],
                        (1.0 - alpha) * p[2] + alpha * color[2],
                    ],
                );
            }
        }
    }
}

/// One placement attempt. Rejected when the new cytoplasm would swallow an
/// existing nucleus or the new nucleus lies inside an existing cytoplasm, so
/// every nucleus stays inside exactly one cytoplasm.
fn place_cell(
    rng: &mut impl Rng,
    config: &GeneratorConfig,
    cells: &[Ellipse],
    existing: &[Instance],
    margin: f64,
) -> Option<(Ellipse, Mask, Mask)> {
    let (h, w) = (config.height, config.width);
    let a = config.cytoplasm_axes.sample(rng);
    let b = config.cytoplasm_axes.sample(rng);
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let (cx, cy) = if !cells.is_empty() && rng.gen_bool(config.overlap_prob) {
        let anchor = cells[rng.gen_range(0..cells.len())];
        let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let dist = rng.gen_range(0.6..1.3) * anchor.a.max(anchor.b);
        (anchor.cx + dist * ang.cos(), anchor.cy + dist * ang.sin())
    } else {
        (
            rng.gen_range(margin..w as f64 - margin),
            rng.gen_range(margin..h as f64 - margin),
        )
    };
    let cyto = Ellipse {
        cx: cx.clamp(margin, w as f64 - margin),
        cy: cy.clamp(margin, h as f64 - margin),
        a,
        b,
        theta,
    };

    // the nucleus shares the cell orientation and is offset within the slack
    // between the two sets of axes
    let na = config.nucleus_axes.sample(rng).min(a);
    let nb = config.nucleus_axes.sample(rng).min(b);
    let r: f64 = rng.gen_range(0.0..0.6);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (u, v) = (r * (a - na) * phi.cos(), r * (b - nb) * phi.sin());
    let (s, c) = theta.sin_cos();
    let nucleus = Ellipse {
        cx: cyto.cx + u * c - v * s,
        cy: cyto.cy + u * s + v * c,
        a: na,
        b: nb,
        theta,
    };

    let cyto_mask = cyto.rasterize(h, w);
    let raw = nucleus.rasterize(h, w);
    let nucleus_mask = Mask::from_fn(h, w, |y, x| raw.get(y, x) && cyto_mask.get(y, x));
    if cyto_mask.is_empty() || nucleus_mask.is_empty() {
        return None;
    }
    for inst in existing {
        let clash = match inst.class_id {
            ClassId::Nucleus => inst.mask.is_subset_of(&cyto_mask),
            ClassId::Cytoplasm => nucleus_mask.is_subset_of(&inst.mask),
        };
        if clash {
            return None;
        }
    }
    Some((cyto, cyto_mask, nucleus_mask))
}

pub fn generate_scene(seed: u64, config: &GeneratorConfig) -> Result<Scene> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = rng_from_seed(seed);

    // background: light tone plus a linear gradient in a random direction
    let base = [
        rng.gen_range(0.86..0.94),
        rng.gen_range(0.84..0.92),
        rng.gen_range(0.84..0.92),
    ];
    let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ds, dc) = dir.sin_cos();
    let mut image = Image::filled(h, w, 0.0);
    let diag = ((h * h + w * w) as f64).sqrt();
    for y in 0..h {
        for x in 0..w {
            let proj = ((x as f64 - 0.5 * w as f64) * dc + (y as f64 - 0.5 * h as f64) * ds) / diag;
            let g = config.gradient * proj;
            image.set_pixel(y, x, [base[0] + g, base[1] + g, base[2] + g]);
        }
    }

    let n_cells = rng.gen_range(config.cell_count.min..=config.cell_count.max);
    let mut cells: Vec<Ellipse> = Vec::with_capacity(n_cells);
    let mut instances = Vec::with_capacity(2 * n_cells);
    let margin = 4.0f64.min(0.25 * w.min(h) as f64);
    for _ in 0..n_cells {
        let Some((cyto, cyto_mask, nucleus_mask)) =
            (0..8).find_map(|_| place_cell(&mut rng, config, &cells, &instances, margin))
        else {
            continue;
        };
        let cyto_color = [
            rng.gen_range(0.45..0.7),
            rng.gen_range(0.55..0.8),
            rng.gen_range(0.75..0.95),
        ];
        let nuc_color = [
            rng.gen_range(0.15..0.35),
            rng.gen_range(0.1..0.25),
            rng.gen_range(0.35..0.55),
        ];
        let cyto_alpha = config.cytoplasm_opacity.sample(&mut rng) * config.contrast;
        let nuc_alpha = config.nucleus_opacity.sample(&mut rng) * config.contrast;
        blend(&mut image, &cyto_mask, cyto_color, cyto_alpha);
        blend(&mut image, &nucleus_mask, nuc_color, nuc_alpha);

        cells.push(cyto);
        instances.push(Instance::new(cyto_mask, ClassId::Cytoplasm)?);
        instances.push(Instance::new(nucleus_mask, ClassId::Nucleus)?);
    }

    if config.noise_std > 0.0 {
        let normal = Normal::new(0.0, config.noise_std).expect("validated noise std");
        for v in image.as_mut_slice() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in image.as_mut_slice() {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(Scene {
        image,
        instances: Some(instances),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub generator: GeneratorConfig,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// Annotated held-out scenes used for evaluation.
    pub n_validation: usize,
    pub root_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub image_size: (usize, usize),
    pub generator_config: GeneratorConfig,
    pub root_seed: u64,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Labeled,
    Unlabeled,
    Validation,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Labeled => 1,
            Split::Unlabeled => 2,
            Split::Validation => 3,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Split::Labeled => "l",
            Split::Unlabeled => "u",
            Split::Validation => "v",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    class_id: ClassId,
    bbox: [f64; 4],
    mask: Rle,
}

#[derive(Serialize, Deserialize)]
struct InstancesFile {
    seed: u64,
    height: usize,
    width: usize,
    instances: Vec<InstanceRecord>,
}

pub fn scene_dir(root: &Path, id: &str) -> PathBuf {
    root.join("scenes").join(id)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes one scene; `labeled` controls whether the annotation sidecar is
/// stored.
pub fn write_scene(root: &Path, id: &str, scene: &Scene, labeled: bool) -> Result<()> {
    let dir = scene_dir(root, id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let img_path = dir.join(IMAGE_FILE);
    let file = fs::File::create(&img_path).map_err(|e| Error::io(&img_path, e))?;
    scene
        .image
        .write_to(BufWriter::new(file))
        .map_err(|e| Error::io(&img_path, e))?;
    let sidecar = dir.join(INSTANCES_FILE);
    if labeled {
        let record = InstancesFile {
            seed: scene.seed,
            height: scene.image.height(),
            width: scene.image.width(),
            instances: scene
                .instances()
                .iter()
                .map(|inst| InstanceRecord {
                    class_id: inst.class_id,
                    bbox: inst.bbox.to_array(),
                    mask: inst.mask.to_rle(),
                })
                .collect(),
        };
        let json = serde_json::to_vec_pretty(&record).expect("instance records serialize");
        write_file(&sidecar, &json)?;
    } else if sidecar.exists() {
        fs::remove_file(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(())
}

pub fn load_scene(root: &Path, id: &str, seed: u64) -> Result<Scene> {
    let dir = scene_dir(root, id);
    let img_path = dir.join(IMAGE_FILE);
    let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
    let image = Image::read_from(&bytes[..]).map_err(|m| Error::format(&img_path, m))?;
    let sidecar = dir.join(INSTANCES_FILE);
    let instances = if sidecar.exists() {
        let raw = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let file: InstancesFile = serde_json::from_slice(&raw).map_err(|e| Error::format(&sidecar, e.to_string()))?;
        if file.height != image.height() || file.width != image.width() {
            return Err(Error::format(&sidecar, "annotation size does not match image"));
        }
        let mut out = Vec::with_capacity(file.instances.len());
        for rec in file.instances {
            let mask = Mask::from_rle(&rec.mask).map_err(|e| Error::format(&sidecar, e.to_string()))?;
            let inst = Instance::new(mask, rec.class_id).map_err(|e| Error::format(&sidecar, e.to_string()))?;
            if inst.bbox.to_array() != rec.bbox {
                return Err(Error::format(&sidecar, "stored bbox is not the tight mask box"));
            }
            out.push(inst);
        }
        Some(out)
    } else {
        None
    };
    Ok(Scene { image, instances, seed })
}

/// Generates every scene of the dataset and writes it under `root`. The
/// manifest is written last, via a temporary file and rename, so a failed
/// build never leaves a manifest behind.
pub fn build_dataset(root: &Path, spec: &DatasetSpec) -> Result<DatasetManifest> {
    spec.generator.validate()?;
    if spec.n_labeled == 0 {
        return Err(Error::Config("n_labeled must be at least 1".into()));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest_path = root.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }

    let mut manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        image_size: (spec.generator.height, spec.generator.width),
        generator_config: spec.generator.clone(),
        root_seed: spec.root_seed,
        labeled_ids: Vec::new(),
        unlabeled_ids: Vec::new(),
        validation_ids: Vec::new(),
        seeds: BTreeMap::new(),
    };
    let mut used = std::collections::HashSet::new();
    for (split, count) in [
        (Split::Labeled, spec.n_labeled),
        (Split::Unlabeled, spec.n_unlabeled),
        (Split::Validation, spec.n_validation),
    ] {
        for i in 0..count {
            let id = format!("{}{:05}", split.prefix(), i);
            let mut seed = derive_seed(spec.root_seed, &[split.tag(), i as u64]);
            while !used.insert(seed) {
                seed = derive_seed(seed, &[0]);
            }
            let scene = generate_scene(seed, &spec.generator)?;
            write_scene(root, &id, &scene, split != Split::Unlabeled)?;
            manifest.seeds.insert(id.clone(), seed);
            match split {
                Split::Labeled => manifest.labeled_ids.push(id),
                Split::Unlabeled => manifest.unlabeled_ids.push(id),
                Split::Validation => manifest.validation_ids.push(id),
            }
        }
    }

    let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&tmp, &json)?;
    fs::rename(&tmp, &manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<DatasetManifest> {
        let path = root.join(MANIFEST_FILE);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_slice(&raw).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported schema version {}", m.schema_version),
            ));
        }
        m.validate(root)?;
        Ok(m)
    }

    pub fn validate(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let labeled: std::collections::HashSet<&String> = self.labeled_ids.iter().collect();
        if self
            .unlabeled_ids
            .iter()
            .chain(&self.validation_ids)
            .any(|id| labeled.contains(id))
        {
            return Err(Error::format(&path, "scene ids overlap between splits"));
        }
        for id in self.all_ids() {
            if !self.seeds.contains_key(id) {
                return Err(Error::format(&path, format!("no seed recorded for {id}")));
            }
            let img = scene_dir(root, id).join(IMAGE_FILE);
            if !img.is_file() {
                return Err(Error::format(&path, format!("missing scene file {}", img.display())));
            }
        }
        Ok(())
    }

    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.labeled_ids
            .iter()
            .chain(&self.unlabeled_ids)
            .chain(&self.validation_ids)
    }

    pub fn load_scene(&self, root: &Path, id: &str) -> Result<Scene> {
        let seed = *self
            .seeds
            .get(id)
            .ok_or_else(|| Error::format(root.join(MANIFEST_FILE), format!("unknown scene id {id}")))?;
        load_scene(root, id, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_cells() -> GeneratorConfig {
        GeneratorConfig {
            cell_count: Range::new(3, 3),
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn zero_cells_gives_background_only() {
        let cfg = GeneratorConfig {
            cell_count: Range::new(0, 0),
            ..GeneratorConfig::default()
        };
        let s = generate_scene(7, &cfg).unwrap();
        assert!(s.instances().is_empty());
        assert!(s.image.in_unit_range());
        // no dark nucleus pixels anywhere
        assert!(s.image.as_slice().iter().all(|&v| v > 0.6));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::default();
        let a = generate_scene(42, &cfg).unwrap();
        let b = generate_scene(42, &cfg).unwrap();
        assert_eq!(a.image.to_bytes(), b.image.to_bytes());
        assert_eq!(a, b);
    }

    #[test]
    fn three_cells_with_exact_containment() {
        let s = generate_scene(42, &three_cells()).unwrap();
        let inst = s.instances();
        assert_eq!(inst.iter().filter(|i| i.class_id == ClassId::Cytoplasm).count(), 3);
        assert_eq!(inst.iter().filter(|i| i.class_id == ClassId::Nucleus).count(), 3);
        for pair in inst.chunks(2) {
            let (cyto, nuc) = (&pair[0].mask, &pair[1].mask);
            for y in 0..cyto.height() {
                for x in 0..cyto.width() {
                    assert!(
                        !nuc.get(y, x) || cyto.get(y, x),
                        "nucleus pixel ({y},{x}) outside cytoplasm"
                    );
                }
            }
        }
    }

    #[test]
    fn invariants_hold_over_many_seeds() {
        let cfg = GeneratorConfig {
            cell_count: Range::new(1, 6),
            overlap_prob: 0.8,
            ..GeneratorConfig::default()
        };
        for seed in 0..40 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert!(s.image.in_unit_range());
            let cytos: Vec<&Instance> = s
                .instances()
                .iter()
                .filter(|i| i.class_id == ClassId::Cytoplasm)
                .collect();
            for inst in s.instances() {
                assert!(!inst.mask.is_empty());
                assert_eq!(inst.mask.bbox(), Some(inst.bbox));
                if inst.class_id == ClassId::Nucleus {
                    let hosts = cytos.iter().filter(|c| inst.mask.is_subset_of(&c.mask)).count();
                    assert_eq!(hosts, 1, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn rejects_oversized_nucleus() {
        let cfg = GeneratorConfig {
            nucleus_axes: Range::new(3.0, 12.0),
            cytoplasm_axes: Range::new(10.0, 16.0),
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate_scene(1, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn small_dataset_manifest_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            generator: GeneratorConfig::default(),
            n_labeled: 4,
            n_unlabeled: 0,
            n_validation: 0,
            root_seed: 3,
        };
        let m = build_dataset(dir.path(), &spec).unwrap();
        assert_eq!(m.labeled_ids.len(), 4);
        assert!(m.unlabeled_ids.is_empty());
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        let id = &m.labeled_ids[2];
        let scene = m.load_scene(dir.path(), id).unwrap();
        assert_eq!(scene, generate_scene(m.seeds[id], &spec.generator).unwrap());
    }

    #[test]
    fn failed_build_leaves_no_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ok = DatasetSpec {
            generator: GeneratorConfig::default(),
            n_labeled: 1,
            n_unlabeled: 1,
            n_validation: 0,
            root_seed: 0,
        };
        build_dataset(dir.path(), &ok).unwrap();
        assert!(dir.path().join(MANIFEST_FILE).exists());
        // block scene writes by replacing the scene tree with a plain file
        fs::remove_dir_all(dir.path().join("scenes")).unwrap();
        fs::write(dir.path().join("scenes"), b"not a directory").unwrap();
        let err = build_dataset(dir.path(), &ok).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(!dir.path().join(MANIFEST_FILE).exists());
    }
}
