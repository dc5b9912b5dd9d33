//! Replay buffers and window sampling.

use super::dataset::{OfflineDataset, Trajectory};
use super::TasksError;
use crate::dt::TrajectoryWindow;
use crate::numerics::Rng;

/// A verbatim subset of one task's offline trajectories, capped by a
/// transition budget.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    pub task_index: usize,
    pub trajectories: Vec<Trajectory>,
    pub capacity_transitions: usize,
}

impl ReplayBuffer {
    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.horizon()).sum()
    }
}

/// Uniformly samples whole trajectories without replacement until adding
/// another would exceed `capacity` transitions.
pub fn build_replay_buffer(
    dataset: &OfflineDataset,
    task_index: usize,
    capacity: usize,
    rng: &mut Rng,
) -> Result<ReplayBuffer, TasksError> {
    let horizon = dataset.task.horizon;
    if capacity < horizon {
        return Err(TasksError::CapacityTooSmall { capacity, horizon });
    }
    let mut order: Vec<usize> = (0..dataset.trajectories.len()).collect();
    rng.shuffle(&mut order);
    let mut trajectories = Vec::new();
    let mut used = 0;
    for idx in order {
        let h = dataset.trajectories[idx].horizon();
        if used + h > capacity {
            break;
        }
        trajectories.push(dataset.trajectories[idx].clone());
        used += h;
    }
    Ok(ReplayBuffer {
        task_index,
        trajectories,
        capacity_transitions: capacity,
    })
}

/// Anything windows can be sampled from.
pub trait WindowSource {
    fn trajectories(&self) -> &[Trajectory];
}

impl WindowSource for OfflineDataset {
    fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }
}

impl WindowSource for ReplayBuffer {
    fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }
}

/// Draws `count` windows uniformly over (trajectory, window-end) pairs.
/// Windows whose nominal start precedes the episode keep their content
/// aligned from position zero and zero-fill the remainder.
pub fn sample_windows<S: WindowSource>(
    source: &S,
    count: usize,
    context_len: usize,
    state_dim: usize,
    action_dim: usize,
    rng: &mut Rng,
) -> Result<Vec<TrajectoryWindow>, TasksError> {
    let trajectories = source.trajectories();
    if trajectories.is_empty() {
        return Err(TasksError::EmptySource);
    }
    let mut windows = Vec::with_capacity(count);
    for _ in 0..count {
        let traj = &trajectories[rng.below(trajectories.len())];
        let h = traj.horizon();
        let end = rng.below(h);
        windows.push(window_from_trajectory(
            traj,
            end,
            context_len,
            state_dim,
            action_dim,
        ));
    }
    Ok(windows)
}

/// Extracts the window ending at step `end` (inclusive).
pub fn window_from_trajectory(
    traj: &Trajectory,
    end: usize,
    context_len: usize,
    state_dim: usize,
    action_dim: usize,
) -> TrajectoryWindow {
    let start = (end + 1).saturating_sub(context_len);
    let valid = end + 1 - start;
    let mut rtg = vec![0.0; context_len];
    let mut states = vec![0.0; context_len * state_dim];
    let mut actions = vec![0.0; context_len * action_dim];
    let mut timesteps = vec![0usize; context_len];
    for (pos, step) in (start..=end).enumerate() {
        rtg[pos] = traj.returns_to_go[step];
        states[pos * state_dim..(pos + 1) * state_dim]
            .copy_from_slice(&traj.states[step * state_dim..(step + 1) * state_dim]);
        actions[pos * action_dim..(pos + 1) * action_dim]
            .copy_from_slice(&traj.actions[step * action_dim..(step + 1) * action_dim]);
        timesteps[pos] = step;
    }
    TrajectoryWindow {
        rtg,
        states,
        actions,
        timesteps,
        valid_len: valid,
    }
}
