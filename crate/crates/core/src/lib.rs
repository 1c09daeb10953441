//! Semi-supervised semantic segmentation by mutual knowledge distillation.
//!
//! Two student networks are trained jointly: each keeps an exponential
//! moving average teacher, teachers pseudo-label the *other* student's
//! strong view, and the students additionally cross-supervise each other.
//! Classifier losses are computed under closed-form implicit semantic
//! augmentation driven by streaming per-class feature statistics.
//!
//! Everything is deterministic given a master seed: every random decision
//! is drawn from a named [`rng::Stream`] keyed by `(seed, stream, step)`.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod driver;
pub mod error;
pub mod eval;
pub mod isda;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
