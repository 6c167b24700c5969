//! Training protocol: supervised warmup, teacher creation, mixed labeled and
//! unlabeled steps, weight averaging, checkpoints and evaluation.
//!
//! Every random draw comes from a counter-based stream keyed on the run seed
//! and the iteration, so a [`RunState`] plus the config is enough to resume a
//! run exactly.

mod audit;
mod checkpoint;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentConfig};
use crate::distill::{
    alpha_schedule, ema_update, lambda_schedule, prepare_unsupervised, total_loss, unsupervised_loss,
    UnsupervisedWeights, RAMP_DOWN_LEN, RAMP_UP_END, TEACHER_INIT_ITER, WARMUP_ITERS,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{evaluate, InstanceSet, MetricReport};
use crate::rng::{derive_seed, stream};
use crate::segmenter::{LossWeights, ParameterVector, Segmenter, SegmenterConfig};
use crate::synth::{DatasetManifest, Instance, Scene};

pub use audit::{gradient_audit, AuditConfig, AuditEntry, AuditReport};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

pub const TELEMETRY_FILE: &str = "telemetry.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    MmtPsm,
    SupervisedOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::MmtPsm => "mmt_psm",
            Mode::SupervisedOnly => "supervised_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoMgd,
    NoPsm,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMgd => "no_mgd",
            Ablation::NoPsm => "no_psm",
        }
    }
}

/// Learning rate `rate` from iteration `from` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub from: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub base_lr: f64,
    /// Later learning rates, in increasing `from` order.
    pub lr_steps: Vec<LrStep>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier of the feature distillation term.
    pub gamma: f64,
    pub temperature: f64,
    /// Cross-entropy weight of background pseudo-labels.
    pub background_weight: f64,
    /// Probability of flipping the labeled scene of a step.
    pub labeled_flip_prob: f64,
    /// Save a checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Image size is taken from the training data.
    pub model: SegmenterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 2000,
            base_lr: 1e-2,
            lr_steps: vec![LrStep { from: 5000, rate: 1e-3 }, LrStep { from: 7000, rate: 1e-4 }],
            momentum: 0.9,
            weight_decay: 0.0,
            gamma: 5.0,
            temperature: 0.5,
            background_weight: 1.5,
            labeled_flip_prob: 0.5,
            checkpoint_every: 0,
            seed: 0,
            augment: AugmentConfig::default(),
            model: SegmenterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, mode: Mode) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_iters == 0 {
            return bad("total_iters must be positive".into());
        }
        if mode == Mode::MmtPsm && self.total_iters < RAMP_UP_END + RAMP_DOWN_LEN {
            return bad(format!(
                "mmt_psm needs at least {} iterations to fit warmup and both ramps",
                RAMP_UP_END + RAMP_DOWN_LEN
            ));
        }
        let positive = [
            ("base_lr", self.base_lr),
            ("temperature", self.temperature),
            ("background_weight", self.background_weight),
        ];
        for (name, v) in positive
            .into_iter()
            .chain(self.lr_steps.iter().map(|s| ("lr_steps.rate", s.rate)))
        {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.lr_steps.windows(2).any(|w| w[0].from >= w[1].from) {
            return bad("lr_steps must be in increasing order".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.gamma >= 0.0) {
            return bad("weight_decay and gamma must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.labeled_flip_prob) {
            return bad("labeled_flip_prob must lie in [0, 1]".into());
        }
        self.augment.validate()
    }

    pub fn learning_rate(&self, t: u64) -> f64 {
        self.lr_steps
            .iter()
            .take_while(|s| s.from <= t)
            .last()
            .map_or(self.base_lr, |s| s.rate)
    }
}

/// Everything that changes from one iteration to the next. Random streams
/// are derived from the config seed and `t`, so they need no storage.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Number of completed iterations.
    pub t: u64,
    pub student: ParameterVector,
    pub momentum: Vec<f64>,
    pub teacher: Option<ParameterVector>,
}

/// One line of training telemetry. Unsupervised fields are absent in
/// supervised-only runs and during warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_foreground: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_background: Option<usize>,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_seg: f64,
    pub l_rpn: f64,
    pub l_sup: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_psm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_mgd: Option<f64>,
    pub total: f64,
}

impl StepRecord {
    fn dump(&self) -> String {
        format!(
            "l_cls={} l_reg={} l_seg={} l_rpn={} l_sup={} l_psm={:?} l_mgd={:?} total={}",
            self.l_cls, self.l_reg, self.l_seg, self.l_rpn, self.l_sup, self.l_psm, self.l_mgd, self.total
        )
    }
}

/// Scenes held in memory for one run.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub labeled: Vec<Scene>,
    pub unlabeled: Vec<(String, Image)>,
    pub validation: Vec<Scene>,
}

impl TrainData {
    /// Loads the given labeled subset, the validation split and, when
    /// `with_unlabeled`, every unlabeled scene.
    pub fn load(root: &Path, manifest: &DatasetManifest, labeled_ids: &[String], with_unlabeled: bool) -> Result<Self> {
        let load = |id: &String| manifest.load_scene(root, id);
        Ok(TrainData {
            labeled: labeled_ids.iter().map(load).collect::<Result<_>>()?,
            unlabeled: if with_unlabeled {
                manifest
                    .unlabeled_ids
                    .iter()
                    .map(|id| Ok((id.clone(), load(id)?.image)))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            },
            validation: manifest.validation_ids.iter().map(load).collect::<Result<_>>()?,
        })
    }

    fn image_size(&self) -> Option<(usize, usize)> {
        self.labeled.first().map(|s| (s.image.height(), s.image.width()))
    }
}

/// Mirrors a scene left to right, annotations included.
pub fn flip_scene(scene: &Scene) -> Scene {
    let w = scene.image.width();
    Scene {
        image: scene.image.flip_horizontal(),
        instances: scene.instances.as_ref().map(|v| {
            v.iter()
                .map(|i| Instance {
                    mask: i.mask.flip_horizontal(),
                    class_id: i.class_id,
                    bbox: i.bbox.flip_horizontal(w),
                })
                .collect()
        }),
        seed: scene.seed,
    }
}

pub fn evaluate_params(model: &Segmenter, params: &ParameterVector, scenes: &[Scene]) -> Result<MetricReport> {
    let mut preds = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for s in scenes {
        preds.push(InstanceSet::from_detections(&model.predict(params, &s.image)?));
        gts.push(InstanceSet::from_ground_truth(s.instances()));
    }
    evaluate(&preds, &gts)
}

const INIT_STREAM: u64 = 0x1417;
const LABELED_STREAM: u64 = 0x1ABE;
const UNLABELED_STREAM: u64 = 0x0B1E;
const VIEW_STREAM: u64 = 0x71E5;

pub struct RunResult {
    pub state: RunState,
    pub telemetry: Vec<StepRecord>,
    pub report: MetricReport,
}

pub struct Trainer {
    model: Segmenter,
    config: TrainConfig,
    mode: Mode,
    ablation: Ablation,
    data: TrainData,
}

impl Trainer {
    pub fn new(mut config: TrainConfig, mode: Mode, ablation: Ablation, data: TrainData) -> Result<Trainer> {
        config.validate(mode)?;
        let (h, w) = data
            .image_size()
            .ok_or_else(|| Error::Config("no labeled scenes to train on".into()))?;
        let all = data
            .labeled
            .iter()
            .chain(&data.validation)
            .map(|s| &s.image)
            .chain(data.unlabeled.iter().map(|(_, i)| i));
        if all.clone().any(|i| i.height() != h || i.width() != w) {
            return Err(Error::Shape("training scenes differ in size".into()));
        }
        if data.labeled.iter().any(|s| !s.is_labeled()) {
            return Err(Error::Invalid("a labeled scene carries no annotations".into()));
        }
        if mode == Mode::MmtPsm && data.unlabeled.is_empty() {
            return Err(Error::Config("mmt_psm needs unlabeled scenes".into()));
        }
        config.model.height = h;
        config.model.width = w;
        let model = Segmenter::new(config.model.clone())?;
        Ok(Trainer {
            model,
            config,
            mode,
            ablation,
            data,
        })
    }

    pub fn model(&self) -> &Segmenter {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn init_state(&self) -> RunState {
        let student = self.model.init_params(derive_seed(self.config.seed, &[INIT_STREAM]));
        RunState {
            t: 0,
            momentum: vec![0.0; student.len()],
            student,
            teacher: None,
        }
    }

    pub fn header(&self, state: &RunState) -> CheckpointHeader {
        CheckpointHeader {
            version: CHECKPOINT_VERSION,
            t: state.t,
            mode: self.mode,
            ablation: self.ablation,
            config: self.config.clone(),
            layout: (**self.model.layout()).clone(),
            has_teacher: state.teacher.is_some(),
        }
    }

    /// Checks that a checkpoint belongs to this run and returns its state.
    pub fn restore(&self, ckpt: Checkpoint) -> Result<RunState> {
        let h = &ckpt.header;
        if h.layout != **self.model.layout() {
            return Err(Error::Shape("checkpoint layout does not match the model".into()));
        }
        if h.config != self.config || h.mode != self.mode || h.ablation != self.ablation {
            return Err(Error::Config(
                "checkpoint was written by a different run configuration".into(),
            ));
        }
        Ok(ckpt.state)
    }

    /// Draws this iteration's labeled scene (flipped or not) and unlabeled
    /// scene index from their own streams.
    fn draw(&self, t: u64) -> (usize, bool, usize) {
        let mut lr = stream(self.config.seed, &[LABELED_STREAM, t]);
        let li = lr.gen_range(0..self.data.labeled.len());
        let flip = lr.gen_bool(self.config.labeled_flip_prob);
        let ui = if self.data.unlabeled.is_empty() {
            0
        } else {
            stream(self.config.seed, &[UNLABELED_STREAM, t]).gen_range(0..self.data.unlabeled.len())
        };
        (li, flip, ui)
    }

    fn uses_unlabeled(&self, t: u64) -> bool {
        self.mode == Mode::MmtPsm && t >= WARMUP_ITERS
    }

    /// Runs iteration `state.t` on scenes drawn from the run's streams.
    pub fn step(&self, state: &mut RunState) -> Result<StepRecord> {
        let (li, flip, ui) = self.draw(state.t);
        let labeled = &self.data.labeled[li];
        let flipped;
        let labeled = if flip {
            flipped = flip_scene(labeled);
            &flipped
        } else {
            labeled
        };
        let unlabeled = self
            .uses_unlabeled(state.t)
            .then(|| (self.data.unlabeled[ui].0.as_str(), &self.data.unlabeled[ui].1));
        self.train_step(state, labeled, unlabeled)
    }

    /// One optimisation step at iteration `state.t`: supervised loss on
    /// `labeled`, and after warmup the unsupervised terms on `unlabeled`; then
    /// the SGD update, teacher creation or weight averaging, and `t += 1`.
    pub fn train_step(
        &self,
        state: &mut RunState,
        labeled: &Scene,
        unlabeled: Option<(&str, &Image)>,
    ) -> Result<StepRecord> {
        let t = state.t;
        let cfg = &self.config;
        if t >= cfg.total_iters {
            return Err(Error::Invalid(format!("run already finished at iteration {t}")));
        }
        if state.teacher.is_some() != (t >= TEACHER_INIT_ITER && self.mode == Mode::MmtPsm) {
            return Err(Error::Invalid(format!(
                "teacher presence is inconsistent with iteration {t}"
            )));
        }
        let lr = cfg.learning_rate(t);
        let mut grad = self.model.zero_grad();
        let (sup, _) = self
            .model
            .supervised_loss(&state.student, labeled, &LossWeights::ALL, Some(&mut grad))?;

        let lambda = match self.mode {
            Mode::MmtPsm => lambda_schedule(t, cfg.total_iters)?,
            Mode::SupervisedOnly => 0.0,
        };
        let mut rec = StepRecord {
            t,
            lambda,
            alpha: None,
            lr,
            s_foreground: None,
            kept_background: None,
            l_cls: sup.cls,
            l_reg: sup.reg,
            l_seg: sup.seg,
            l_rpn: sup.rpn,
            l_sup: sup.total(),
            l_psm: None,
            l_mgd: None,
            total: sup.total(),
        };

        if let Some((id, image)) = unlabeled.filter(|_| self.uses_unlabeled(t)) {
            let teacher = state.teacher.as_ref().expect("teacher exists after warmup");
            let views = make_views(image, id, derive_seed(cfg.seed, &[VIEW_STREAM, t]), &cfg.augment)?;
            let targets = prepare_unsupervised(&self.model, teacher, image, &views, cfg.temperature)?;
            let weights = UnsupervisedWeights {
                psm: (self.ablation != Ablation::NoPsm).then_some(lambda),
                mgd: (self.ablation != Ablation::NoMgd).then_some(lambda * cfg.gamma),
            };
            let ul = unsupervised_loss(
                &self.model,
                &state.student,
                &targets,
                cfg.background_weight,
                weights,
                Some(&mut grad),
            )?;
            rec.s_foreground = Some(targets.kept_foreground());
            rec.kept_background = Some(targets.kept_background());
            rec.l_psm = Some(ul.psm);
            rec.l_mgd = Some(ul.mgd);
        }

        rec.total = match self.mode {
            Mode::MmtPsm => total_loss(
                rec.l_sup,
                rec.l_psm.unwrap_or(0.0),
                rec.l_mgd.unwrap_or(0.0),
                t,
                cfg.total_iters,
                cfg.gamma,
            )
            .map_err(|e| match e {
                Error::NonFinite { t, .. } => Error::NonFinite { t, dump: rec.dump() },
                other => other,
            })?,
            Mode::SupervisedOnly => rec.l_sup,
        };
        if !rec.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                t,
                dump: format!(
                    "{} (gradient finite: {})",
                    rec.dump(),
                    grad.iter().all(|g| g.is_finite())
                ),
            });
        }

        let wd = cfg.weight_decay;
        let params = state.student.values_mut();
        for ((p, v), g) in params.iter_mut().zip(&mut state.momentum).zip(&grad) {
            *v = cfg.momentum * *v + g + wd * *p;
            *p -= lr * *v;
        }

        if self.mode == Mode::MmtPsm {
            if t + 1 == TEACHER_INIT_ITER {
                state.teacher = Some(state.student.clone());
            } else if t > TEACHER_INIT_ITER {
                let alpha = alpha_schedule(t)?;
                ema_update(state.teacher.as_mut().expect("teacher exists"), &state.student, alpha)?;
                rec.alpha = Some(alpha);
            }
        }
        state.t += 1;
        Ok(rec)
    }

    pub fn evaluate(&self, params: &ParameterVector) -> Result<MetricReport> {
        evaluate_params(&self.model, params, &self.data.validation)
    }

    /// Trains from a fresh state to the end and evaluates the student.
    pub fn run(&self, out_dir: Option<&Path>) -> Result<RunResult> {
        self.run_from(self.init_state(), out_dir)
    }

    /// Continues `state` to `total_iters`. With `out_dir`, writes telemetry
    /// lines, periodic and final checkpoints and the evaluation report.
    pub fn run_from(&self, mut state: RunState, out_dir: Option<&Path>) -> Result<RunResult> {
        if self.data.validation.is_empty() {
            return Err(Error::Config("no validation scenes to evaluate on".into()));
        }
        let mut sink = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(TELEMETRY_FILE);
                Some((
                    BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?),
                    path,
                ))
            }
            None => None,
        };
        let mut telemetry =
            Vec::with_capacity((self.config.total_iters - state.t.min(self.config.total_iters)) as usize);
        while state.t < self.config.total_iters {
            let rec = self.step(&mut state)?;
            if let Some((w, path)) = sink.as_mut() {
                let line = serde_json::to_string(&rec).expect("telemetry serializes");
                writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            telemetry.push(rec);
            let every = self.config.checkpoint_every;
            if let Some(dir) =
                out_dir.filter(|_| every > 0 && state.t.is_multiple_of(every) && state.t < self.config.total_iters)
            {
                save_checkpoint(
                    &dir.join(format!("ckpt_{:06}.ckpt", state.t)),
                    &self.header(&state),
                    &state,
                )?;
            }
        }
        if let Some((mut w, path)) = sink {
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        let report = self.evaluate(&state.student)?;
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join(FINAL_CHECKPOINT), &self.header(&state), &state)?;
            let path = dir.join(REPORT_JSON);
            fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(RunResult {
            state,
            telemetry,
            report,
        })
    }
}
