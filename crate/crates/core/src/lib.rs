//! Self-supervised RGB-thermal single-object tracker.
//!
//! The pipeline: a synthetic RGB-T sequence generator, motion-energy
//! pseudo-labels, a shared-weight patch encoder, dynamic graph fusion over
//! an adjacency built from token similarity, a diffusion module that learns
//! to suppress distractor features, and a tracking-metric evaluation
//! harness. Everything runs on the CPU in double precision and is
//! deterministic given a seed.

pub mod amg;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod evalharness;
pub mod image;
pub mod losses;
pub mod mdgf;
pub mod model;
pub mod pseudolabel;
pub mod synthgen;
pub mod tgid;
pub mod trainer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image format error: {0}")]
    ImageFormat(String),
    #[error("degenerate box: w={w}, h={h}")]
    DegenerateBox { w: f64, h: f64 },
    #[error("no pixel exceeded the motion threshold")]
    NoMotion,
    #[error("no frame in the sequence produced a motion label")]
    UnlabelableSequence,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("gradient error: {0}")]
    Grad(#[from] fusetrack_tensor::GradError),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TrackError>;
