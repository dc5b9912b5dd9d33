//! Continual offline reinforcement learning with decision transformers.
//!
//! The crate implements a return-conditioned sequence model over offline
//! trajectories, two anti-forgetting training methods (a multi-head trunk
//! with distillation and selective rehearsal, and weight merging with
//! low-rank adapter fine-tuning), regularization baselines, the standard
//! continual-learning metric suite, a synthetic point-mass task family,
//! and a file-based experiment harness.

pub mod baselines;
pub mod dt;
pub mod lora;
pub mod metrics;
pub mod mhdt;
pub mod numerics;
pub mod tasks;
