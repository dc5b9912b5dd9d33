//! Trajectory windows and their batched tensor form.

use super::{DtConfig, DtError};
use crate::numerics::Tensor;

/// A length-<=K slice of one episode: (return-to-go, state, action, timestep)
/// tuples. Storage is always K steps long; positions at or past `valid_len`
/// are zero padding and are masked out of every loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindow {
    /// K return-to-go scalars.
    pub rtg: Vec<f32>,
    /// K * state_dim row-major states.
    pub states: Vec<f32>,
    /// K * action_dim row-major actions.
    pub actions: Vec<f32>,
    /// K absolute episode timesteps; strictly increasing over valid steps.
    pub timesteps: Vec<usize>,
    pub valid_len: usize,
}

impl TrajectoryWindow {
    /// All-padding window of the configured context length.
    pub fn empty(cfg: &DtConfig) -> Self {
        let k = cfg.context_len;
        TrajectoryWindow {
            rtg: vec![0.0; k],
            states: vec![0.0; k * cfg.state_dim],
            actions: vec![0.0; k * cfg.action_dim],
            timesteps: vec![0; k],
            valid_len: 0,
        }
    }

    pub fn context_len(&self) -> usize {
        self.rtg.len()
    }

    pub fn validate(&self, cfg: &DtConfig) -> Result<(), DtError> {
        let k = cfg.context_len;
        if self.rtg.len() != k
            || self.states.len() != k * cfg.state_dim
            || self.actions.len() != k * cfg.action_dim
            || self.timesteps.len() != k
            || self.valid_len > k
        {
            return Err(DtError::InvalidConfig {
                reason: "window buffers do not match the configured context length".into(),
            });
        }
        for i in 1..self.valid_len {
            if self.timesteps[i] != self.timesteps[i - 1] + 1 {
                return Err(DtError::InvalidConfig {
                    reason: "window timesteps must increase by exactly 1".into(),
                });
            }
        }
        for i in 0..self.valid_len {
            if self.timesteps[i] > cfg.max_timestep {
                return Err(DtError::TimestepOutOfRange {
                    timestep: self.timesteps[i],
                    max: cfg.max_timestep,
                });
            }
        }
        Ok(())
    }
}

/// A batch of windows flattened into the tensors the forward pass consumes.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub n_windows: usize,
    pub context_len: usize,
    /// [n*K, 1]
    pub rtg: Tensor,
    /// [n*K, state_dim]
    pub states: Tensor,
    /// [n*K, action_dim]
    pub actions: Tensor,
    /// n*K absolute timesteps (zero on padding rows).
    pub timesteps: Vec<usize>,
    /// n*K row weights: 1.0 on valid steps, 0.0 on padding.
    pub valid_mask: Vec<f32>,
    /// Index of the last valid step of each window.
    pub last_valid: Vec<usize>,
}

impl WindowBatch {
    pub fn from_windows(windows: &[TrajectoryWindow], cfg: &DtConfig) -> Result<Self, DtError> {
        if windows.is_empty() {
            return Err(DtError::InvalidConfig {
                reason: "empty window batch".into(),
            });
        }
        let k = cfg.context_len;
        let n = windows.len();
        let mut rtg = Vec::with_capacity(n * k);
        let mut states = Vec::with_capacity(n * k * cfg.state_dim);
        let mut actions = Vec::with_capacity(n * k * cfg.action_dim);
        let mut timesteps = Vec::with_capacity(n * k);
        let mut valid_mask = Vec::with_capacity(n * k);
        let mut last_valid = Vec::with_capacity(n);
        for w in windows {
            w.validate(cfg)?;
            rtg.extend_from_slice(&w.rtg);
            states.extend_from_slice(&w.states);
            actions.extend_from_slice(&w.actions);
            timesteps.extend_from_slice(&w.timesteps);
            for t in 0..k {
                valid_mask.push(if t < w.valid_len { 1.0 } else { 0.0 });
            }
            last_valid.push(w.valid_len.saturating_sub(1));
        }
        Ok(WindowBatch {
            n_windows: n,
            context_len: k,
            rtg: Tensor::new(vec![n * k, 1], rtg)?,
            states: Tensor::new(vec![n * k, cfg.state_dim], states)?,
            actions: Tensor::new(vec![n * k, cfg.action_dim], actions)?,
            timesteps,
            valid_mask,
            last_valid,
        })
    }

    /// Loss row weights: every valid position, or only the last valid
    /// position of each window.
    pub fn loss_weights(&self, last_only: bool) -> Vec<f32> {
        if !last_only {
            return self.valid_mask.clone();
        }
        let mut w = vec![0.0; self.n_windows * self.context_len];
        for (i, &last) in self.last_valid.iter().enumerate() {
            if self.valid_mask[i * self.context_len + last] > 0.0 {
                w[i * self.context_len + last] = 1.0;
            }
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DtConfig {
        let mut cfg = DtConfig::new(2, 1, 10);
        cfg.context_len = 3;
        cfg
    }

    #[test]
    fn validate_rejects_non_consecutive_timesteps() {
        let cfg = small_cfg();
        let mut w = TrajectoryWindow::empty(&cfg);
        w.valid_len = 3;
        w.timesteps = vec![0, 2, 3];
        assert!(w.validate(&cfg).is_err());
        w.timesteps = vec![4, 5, 6];
        w.validate(&cfg).unwrap();
    }

    #[test]
    fn validate_rejects_timestep_past_table() {
        let cfg = small_cfg();
        let mut w = TrajectoryWindow::empty(&cfg);
        w.valid_len = 2;
        w.timesteps = vec![10, 11, 0];
        assert!(matches!(
            w.validate(&cfg),
            Err(DtError::TimestepOutOfRange { timestep: 11, .. })
        ));
    }

    #[test]
    fn loss_weights_variants() {
        let cfg = small_cfg();
        let mut w = TrajectoryWindow::empty(&cfg);
        w.valid_len = 2;
        w.timesteps = vec![0, 1, 0];
        let batch = WindowBatch::from_windows(std::slice::from_ref(&w), &cfg).unwrap();
        assert_eq!(batch.loss_weights(false), vec![1.0, 1.0, 0.0]);
        assert_eq!(batch.loss_weights(true), vec![0.0, 1.0, 0.0]);
    }
}
