//! Online multi-object tracking built around two cooperating pieces:
//!
//! * a constant-velocity Kalman filter whose process and measurement noise
//!   are rescaled every frame by the association confidence of the matched
//!   detection, so uncertain matches widen the filter instead of corrupting
//!   it, and
//! * a small recurrent network that scores track/detection pairs from short
//!   feature histories and is trained online from mined pairs, replacing a
//!   hand-weighted assignment cost.
//!
//! The crate ships the full loop: synthetic scene generation, pair mining,
//! network training, Hungarian assignment, track lifecycle management, and
//! CLEAR-MOT / IDF1 scoring, all deterministic under a fixed seed. The
//! `gakp` binary exposes each stage as a subcommand.
//!
//! Batch-level work (cost matrices, gradient batches, scoring) runs on rayon
//! when the default `parallel` feature is enabled and falls back to plain
//! iterators without it; results are bit-identical either way.

pub mod appearance;
pub mod association;
pub mod config;
pub mod detection;
pub mod error;
pub mod geometry;
pub mod gru;
pub mod kalman;
pub mod mot;
pub mod parallel;
pub mod pipeline;
pub mod tracker;

pub use error::{Error, Result};
