//! Desk-scale workbench for reinforcement learning on masked diffusion
//! language models.
//!
//! The crate couples a tiny double-precision transformer with the machinery
//! needed to study diffusion policy gradients end to end: unmasking
//! schedules and samplers, three trajectory-likelihood estimators (full
//! per-step, step-merged, and one-shot any-order), a GRPO-style trainer,
//! and exact-enumeration verifiers for the estimators' correctness claims.

pub mod cli;
pub mod decoding;
pub mod diffmath;
pub mod error;
pub mod likelihood;
pub mod model;
pub mod oracle;
pub mod rltrain;
pub mod tasks;

pub use error::{Error, Result};
