//! Model architecture configuration.

use super::DtError;

/// Architecture of one decision-transformer policy.
#[derive(Debug, Clone, PartialEq)]
pub struct DtConfig {
    /// Context length K: number of (return-to-go, state, action) steps.
    pub context_len: usize,
    /// Number of transformer blocks.
    pub n_layers: usize,
    pub n_heads: usize,
    /// Token embedding width h.
    pub embed_dim: usize,
    /// Inner width d of each block's MLP.
    pub mlp_inner_dim: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Largest timestep the embedding table covers (inclusive).
    pub max_timestep: usize,
    /// Predicted actions are squashed into [-action_bound, action_bound].
    pub action_bound: f32,
}

impl DtConfig {
    /// Paper-scale defaults for a given environment interface.
    pub fn new(state_dim: usize, action_dim: usize, max_timestep: usize) -> Self {
        DtConfig {
            context_len: 20,
            n_layers: 3,
            n_heads: 1,
            embed_dim: 128,
            mlp_inner_dim: 128,
            state_dim,
            action_dim,
            max_timestep,
            action_bound: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), DtError> {
        let fail = |reason: &str| {
            Err(DtError::InvalidConfig {
                reason: reason.to_string(),
            })
        };
        if self.context_len < 1 {
            return fail("context_len must be >= 1");
        }
        if self.n_layers < 1 {
            return fail("n_layers must be >= 1");
        }
        if self.n_heads < 1 || self.embed_dim % self.n_heads != 0 {
            return fail("embed_dim must be divisible by n_heads");
        }
        if self.mlp_inner_dim < 1 {
            return fail("mlp_inner_dim must be >= 1");
        }
        if self.state_dim < 1 || self.action_dim < 1 {
            return fail("state_dim and action_dim must be >= 1");
        }
        if !(self.action_bound > 0.0) {
            return fail("action_bound must be positive");
        }
        Ok(())
    }

    /// Token sequence length seen by the transformer.
    pub fn token_len(&self) -> usize {
        3 * self.context_len
    }
}
