//! Finite-difference check of every hand-written gradient on a small scene.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentConfig};
use crate::distill::{prepare_unsupervised, unsupervised_loss, UnsupervisedTargets, UnsupervisedWeights};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::segmenter::{LossWeights, ParameterVector, Segmenter, SegmenterConfig, SupervisedTargets};
use crate::synth::{generate_scene, GeneratorConfig, Range, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub seed: u64,
    /// Coordinates probed per loss.
    pub coordinates: usize,
    pub step: f64,
    pub background_weight: f64,
    pub temperature: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            seed: 0,
            coordinates: 24,
            step: 1e-4,
            background_weight: 1.5,
            temperature: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub loss: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_gradient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub seed: u64,
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn entry(&self, loss: &str) -> Option<&AuditEntry> {
        self.entries.iter().find(|e| e.loss == loss)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn audit_model() -> Result<Segmenter> {
    Segmenter::new(SegmenterConfig {
        height: 48,
        width: 48,
        hidden: 16,
        ..SegmenterConfig::default()
    })
}

fn audit_scene(seed: u64) -> Result<Scene> {
    let gen = GeneratorConfig {
        height: 48,
        width: 48,
        cell_count: Range::new(2, 3),
        cytoplasm_axes: Range::new(7.0, 10.0),
        nucleus_axes: Range::new(2.0, 3.5),
        ..GeneratorConfig::default()
    };
    generate_scene(seed, &gen)
}

fn jitter(p: &ParameterVector, scale: f64, seed: u64) -> ParameterVector {
    let mut rng = rng_from_seed(seed);
    let mut out = p.clone();
    for v in out.values_mut() {
        *v += rng.gen_range(-scale..=scale);
    }
    out
}

/// `count` coordinates spread round-robin over segments whose name starts
/// with one of `prefixes`.
fn pick_coordinates(model: &Segmenter, prefixes: &[&str], count: usize, seed: u64) -> Vec<usize> {
    let mut segs: Vec<_> = model
        .layout()
        .segments()
        .iter()
        .filter(|s| prefixes.iter().any(|p| s.name.starts_with(p)))
        .collect();
    let mut rng = rng_from_seed(seed);
    segs.shuffle(&mut rng);
    (0..count)
        .map(|i| {
            let s = segs[i % segs.len()];
            s.offset + rng.gen_range(0..s.len)
        })
        .collect()
}

fn check(
    name: &str,
    params: &ParameterVector,
    coords: &[usize],
    step: f64,
    grad: &[f64],
    mut f: impl FnMut(&ParameterVector) -> Result<f64>,
) -> Result<AuditEntry> {
    let mut entry = AuditEntry {
        loss: name.to_string(),
        coordinates: coords.len(),
        max_rel_error: 0.0,
        max_abs_gradient: 0.0,
    };
    let mut p = params.clone();
    for &i in coords {
        let x = p.values()[i];
        p.values_mut()[i] = x + step;
        let up = f(&p)?;
        p.values_mut()[i] = x - step;
        let down = f(&p)?;
        p.values_mut()[i] = x;
        let numeric = (up - down) / (2.0 * step);
        entry.max_rel_error = entry.max_rel_error.max(relative_error(grad[i], numeric));
        entry.max_abs_gradient = entry.max_abs_gradient.max(grad[i].abs());
    }
    Ok(entry)
}

struct Fixture {
    model: Segmenter,
    scene: Scene,
    student: ParameterVector,
    sup_targets: SupervisedTargets,
    unsup: UnsupervisedTargets,
}

/// Draws scenes and parameters until the unlabeled branch has kept
/// foreground proposals and a nonempty mask on every stage.
fn fixture(cfg: &AuditConfig) -> Result<Fixture> {
    let model = audit_model()?;
    let augment = AugmentConfig::default();
    for attempt in 0..32u64 {
        let seed = derive_seed(cfg.seed, &[attempt]);
        let scene = audit_scene(derive_seed(seed, &[1]))?;
        let student = jitter(
            &model.init_params(derive_seed(seed, &[2])),
            0.05,
            derive_seed(seed, &[3]),
        );
        let teacher = jitter(&student, 0.05, derive_seed(seed, &[4]));
        let (_, sup_targets) = model.supervised_loss(&student, &scene, &LossWeights::NONE, None)?;
        let views = make_views(&scene.image, "audit", derive_seed(seed, &[5]), &augment)?;
        let unsup = prepare_unsupervised(&model, &teacher, &scene.image, &views, cfg.temperature)?;
        let usable =
            unsup.kept_foreground() > 0 && unsup.views.iter().all(|v| v.stage_masks.iter().all(|m| !m.is_empty()));
        if usable && sup_targets.foreground_count() > 0 {
            return Ok(Fixture {
                model,
                scene,
                student,
                sup_targets,
                unsup,
            });
        }
    }
    Err(Error::Invalid("no usable audit scene found".into()))
}

/// Compares analytic gradients of each loss term with central differences.
/// Targets (anchor labels, sampled RoIs, pseudo-labels, masks and teacher
/// features) are computed once and held fixed, as they are during training.
pub fn gradient_audit(cfg: &AuditConfig) -> Result<AuditReport> {
    if cfg.coordinates == 0 || !(cfg.step > 0.0) {
        return Err(Error::Config("audit needs a positive coordinate count and step".into()));
    }
    let fx = fixture(cfg)?;
    let m = fx.model.clone();
    let m = &m;
    let n = cfg.coordinates;
    let mut entries = Vec::new();

    let supervised: [(&str, LossWeights, &[&str]); 4] = [
        ("cls", LossWeights::only_cls(), &["stage", "head.hidden", "head.cls"]),
        ("reg", LossWeights::only_reg(), &["stage", "head.hidden", "head.box"]),
        ("seg", LossWeights::only_seg(), &["stage", "head.hidden", "head.mask"]),
        ("rpn", LossWeights::only_rpn(), &["stage", "rpn"]),
    ];
    for (k, (name, weights, prefixes)) in supervised.into_iter().enumerate() {
        let mut grad = m.zero_grad();
        m.supervised_loss_with_targets(&fx.student, &fx.scene.image, &fx.sup_targets, &weights, Some(&mut grad))?;
        let coords = pick_coordinates(m, prefixes, n, derive_seed(cfg.seed, &[0xC0, k as u64]));
        let value = |p: &ParameterVector| {
            let l = m.supervised_loss_with_targets(p, &fx.scene.image, &fx.sup_targets, &weights, None)?;
            Ok(l.cls * weights.cls + l.reg * weights.reg + l.seg * weights.seg + l.rpn * weights.rpn)
        };
        entries.push(check(name, &fx.student, &coords, cfg.step, &grad, value)?);
    }

    let psm_only = UnsupervisedWeights {
        psm: Some(1.0),
        mgd: None,
    };
    let mgd_only = UnsupervisedWeights {
        psm: None,
        mgd: Some(1.0),
    };
    let unsupervised: [(&str, UnsupervisedWeights, &[&str]); 2] = [
        ("psm", psm_only, &["stage", "head.hidden", "head.cls"]),
        ("mgd", mgd_only, &["stage", "adapt"]),
    ];
    for (k, (name, weights, prefixes)) in unsupervised.into_iter().enumerate() {
        let eval = |p: &ParameterVector, grad: Option<&mut [f64]>| {
            let l = unsupervised_loss(m, p, &fx.unsup, cfg.background_weight, weights, grad)?;
            Ok(if weights.psm.is_some() { l.psm } else { l.mgd })
        };
        let mut grad = m.zero_grad();
        eval(&fx.student, Some(&mut grad))?;
        let coords = pick_coordinates(m, prefixes, n, derive_seed(cfg.seed, &[0xD0, k as u64]));
        entries.push(check(name, &fx.student, &coords, cfg.step, &grad, |p| eval(p, None))?);
    }

    Ok(AuditReport {
        seed: cfg.seed,
        entries,
    })
}
