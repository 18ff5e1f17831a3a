//! Sea-state classification toolkit.
//!
//! Turns labeled sea-surface video sessions into balanced cropped image
//! datasets, fine-tunes image classifiers on the Beaufort sea-state task with
//! a two-stage transfer-learning protocol, and evaluates and profiles the
//! results. A deterministic synthetic texture generator ([`synth`]) stands in
//! for real video so the whole pipeline is exercisable at desk scale.
//!
//! Module map:
//! - [`dataset`] — video sessions, crop sampling strategies, manifest build/verify
//! - [`augment`] — training-time augmentation stack and evaluation center crop
//! - [`model`] — classifier abstraction over pretrained backbones, staged freezing
//! - [`train`] — two-stage training loop, plateau LR schedule, size ablation
//! - [`eval`] — confusion matrices, per-class and aggregate metrics, cross-dataset drops
//! - [`profile`] — training time, inference throughput and memory reports
//! - [`synth`] — procedural sea-texture dataset generator
//! - [`nn`] — minimal dense/conv layer stack used by the surrogate backbone

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod img;
pub mod model;
pub mod nn;
pub mod profile;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, ErrorCategory, Result};

/// Version string recorded in manifests and bundles.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
