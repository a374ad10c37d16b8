//! Desk-scale reasoning distillation.
//!
//! Two stages share one synthetic relevance world:
//!
//! 1. A tiny causal policy is warm-started by supervised fine-tuning on
//!    templated reasoning paths, then refined with group-relative policy
//!    optimisation against a five-dimensional rule-based reward.
//! 2. A compact transformer encoder is trained for 3-way relevance
//!    classification, optionally aligned with its own reasoning-augmented
//!    view through in-batch InfoNCE (contrastive reasoning self-distillation).
//!
//! Everything runs on a small reverse-mode autodiff engine over `f64`.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod policy;
pub mod synth;

pub use error::{Error, Result};
