//! Semi-supervised mean-teacher training for a small two-stage instance
//! segmenter on synthetic overlapping-cell images.
//!
//! The crate is organised bottom-up:
//!
//! - [`synth`] generates annotated scenes and writes datasets to disk.
//! - [`augment`] draws and applies recorded stochastic transforms.
//! - [`segmenter`] is the differentiable model with hand-written gradients.
//! - [`distill`] holds the teacher/student distillation formulas.
//! - [`metrics`] implements AJI and mask mAP.
//! - [`trainer`] runs the training protocol, checkpoints and gradient audits.

pub mod augment;
pub mod distill;
pub mod error;
pub mod geometry;
pub mod image;
pub mod mask;
pub mod metrics;
pub mod rng;
pub mod segmenter;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use geometry::BBox;
pub use image::Image;
pub use mask::Mask;
pub use synth::{ClassId, DatasetManifest, DatasetSpec, GeneratorConfig, Instance, Scene};
