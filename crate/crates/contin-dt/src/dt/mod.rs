//! Single-task decision transformer: trajectory windows, the causal
//! transformer forward pass (exposing hidden states), supervised action
//! prediction training, and return-conditioned evaluation rollouts.

mod config;
mod model;
mod rollout;
#[cfg(test)]
mod tests;
mod train;
mod window;

pub use config::DtConfig;
pub use model::{
    forward, init_blocks, init_head, mlp_forward, param_count_for, AdapterIds, BlockIds, DtModel,
    DtView, ForwardOutput, FrontIds, HeadIds,
};
pub use rollout::{rollout, Environment};
pub use train::{action_loss, train_step_single, TrainOptions};
pub use window::{TrajectoryWindow, WindowBatch};

use crate::numerics::NumericsError;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum DtError {
    /// Configuration violates a structural invariant.
    InvalidConfig { reason: String },
    /// A window carries a timestep past the embedding table.
    TimestepOutOfRange { timestep: usize, max: usize },
    /// Numeric failure inside the graph or optimizer.
    Numeric(NumericsError),
}

impl fmt::Display for DtError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DtError::InvalidConfig { reason } => write!(f, "invalid configuration: {reason}"),
            DtError::TimestepOutOfRange { timestep, max } => {
                write!(f, "timestep {timestep} exceeds max_timestep {max}")
            }
            DtError::Numeric(e) => write!(f, "numeric error: {e}"),
        }
    }
}

impl std::error::Error for DtError {}

impl From<NumericsError> for DtError {
    fn from(e: NumericsError) -> Self {
        DtError::Numeric(e)
    }
}
