//! Semi-supervised anomaly detection on continuous-time dynamic graphs.
//!
//! The pipeline: a temporal attention encoder embeds the source node of each
//! interaction from its strictly-earlier neighborhood, a small detector maps
//! the embedding to an anomaly score, and a FIFO memory bank of recent
//! normal/unlabeled scores turns that score into a deviation against a
//! time-decayed reference. Labeled events train through a deviation loss,
//! and every event in a batch contributes through a contrastive loss over
//! pseudo-groups of similar deviation.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod egraph;
pub mod error;
pub mod eval;
pub mod losses;
pub mod membank;
pub mod model;
pub mod numcore;
pub mod parallel;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
