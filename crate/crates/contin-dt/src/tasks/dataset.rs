//! Offline dataset generation.

use super::policy::ScriptedPolicy;
use super::{PointMassEnv, TaskSpec, ACTION_DIM, STATE_DIM};
use crate::dt::Environment;
use crate::numerics::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Expert,
    Middle,
}

impl Quality {
    pub fn name(self) -> &'static str {
        match self {
            Quality::Expert => "expert",
            Quality::Middle => "middle",
        }
    }
}

/// One complete episode. `returns_to_go[t]` is the exact suffix sum of the
/// rewards from step t, and `episode_return` equals `returns_to_go[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// (H+1) * state_dim, including the terminal state.
    pub states: Vec<f32>,
    /// H * action_dim.
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub returns_to_go: Vec<f32>,
    pub episode_return: f32,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }
}

/// Static dataset of one task at one behavior quality.
#[derive(Debug, Clone)]
pub struct OfflineDataset {
    pub task: TaskSpec,
    pub quality: Quality,
    pub trajectories: Vec<Trajectory>,
    pub seed: u64,
}

impl OfflineDataset {
    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.horizon()).sum()
    }

    pub fn mean_return(&self) -> f64 {
        let total: f64 = self.trajectories.iter().map(|t| t.episode_return as f64).sum();
        total / self.trajectories.len() as f64
    }

    /// Largest episode return; used as the evaluation target return.
    pub fn max_return(&self) -> f64 {
        self.trajectories
            .iter()
            .map(|t| t.episode_return as f64)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Rolls the scripted policy of the requested quality for `n_traj` episodes.
/// Deterministic per seed: every episode derives its own child streams.
pub fn generate_dataset(task: &TaskSpec, quality: Quality, n_traj: usize, seed: u64) -> OfflineDataset {
    assert!(n_traj >= 1, "n_traj must be >= 1");
    let policy = match quality {
        Quality::Expert => ScriptedPolicy::expert(task.clone()),
        Quality::Middle => ScriptedPolicy::middle(task.clone()),
    };
    let root = Rng::new(seed);
    let trajectories = (0..n_traj)
        .map(|i| {
            let ep = root.child_indexed("trajectory", i as u64);
            roll_episode(task, &policy, &ep)
        })
        .collect();
    OfflineDataset {
        task: task.clone(),
        quality,
        trajectories,
        seed,
    }
}

fn roll_episode(task: &TaskSpec, policy: &ScriptedPolicy, ep_rng: &Rng) -> Trajectory {
    let h = task.horizon;
    let mut env_rng = ep_rng.child("init");
    let mut policy_rng = ep_rng.child("policy");
    let mut env = PointMassEnv::new(task.clone());
    let mut states = Vec::with_capacity((h + 1) * STATE_DIM);
    let mut actions = Vec::with_capacity(h * ACTION_DIM);
    let mut rewards = Vec::with_capacity(h);
    let mut state = env.reset(&mut env_rng);
    states.extend_from_slice(&state);
    for _ in 0..h {
        let action = policy.action(&state, &mut policy_rng);
        let (next, reward) = env.step(&action);
        actions.extend_from_slice(&action);
        rewards.push(reward);
        states.extend_from_slice(&next);
        state = next;
    }
    let mut returns_to_go = vec![0.0f32; h];
    returns_to_go[h - 1] = rewards[h - 1];
    for t in (0..h - 1).rev() {
        returns_to_go[t] = rewards[t] + returns_to_go[t + 1];
    }
    let episode_return = returns_to_go[0];
    Trajectory {
        states,
        actions,
        rewards,
        returns_to_go,
        episode_return,
    }
}
