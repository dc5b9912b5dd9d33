//! Synthetic point-mass control tasks, scripted behavior policies, offline
//! dataset generation with return-to-go, and replay buffers.

mod dataset;
mod policy;
mod replay;

pub use dataset::{generate_dataset, OfflineDataset, Quality, Trajectory};
pub use policy::ScriptedPolicy;
pub use replay::{build_replay_buffer, sample_windows, ReplayBuffer};

use crate::dt::Environment;
use crate::numerics::Rng;
use std::fmt;

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;
/// Hard speed cap of the point mass.
pub const MAX_SPEED: f32 = 2.0;
/// Standard deviation of the initial-state jitter.
pub const INIT_JITTER: f32 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub enum TasksError {
    /// Replay capacity cannot hold even one trajectory.
    CapacityTooSmall { capacity: usize, horizon: usize },
    EmptySource,
}

impl fmt::Display for TasksError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TasksError::CapacityTooSmall { capacity, horizon } => write!(
                f,
                "replay capacity {capacity} is below the episode horizon {horizon}"
            ),
            TasksError::EmptySource => write!(f, "cannot sample from an empty source"),
        }
    }
}

impl std::error::Error for TasksError {}

/// Which reward the point mass is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskFamily {
    /// Reward is the velocity component along a target heading.
    Direction,
    /// Reward is the negative distance of the speed from a target speed.
    Velocity,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Direction => "direction",
            TaskFamily::Velocity => "velocity",
        }
    }
}

/// One task of the family: a 2-D point mass with a family-specific reward.
/// Tasks in a sequence share state/action spaces and the discount, and
/// differ only in `parameter`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub family: TaskFamily,
    /// Heading angle in radians (Direction) or target speed (Velocity).
    pub parameter: f32,
    pub horizon: usize,
    pub dt: f32,
    pub gamma: f32,
}

impl TaskSpec {
    pub fn direction(theta: f32) -> Self {
        TaskSpec {
            family: TaskFamily::Direction,
            parameter: theta,
            horizon: 50,
            dt: 0.1,
            gamma: 1.0,
        }
    }

    pub fn velocity(target_speed: f32) -> Self {
        TaskSpec {
            family: TaskFamily::Velocity,
            parameter: target_speed,
            horizon: 50,
            dt: 0.1,
            gamma: 1.0,
        }
    }

    /// `n` evenly spaced headings around the circle.
    pub fn direction_sequence(n: usize) -> Vec<TaskSpec> {
        (0..n)
            .map(|i| TaskSpec::direction(2.0 * std::f32::consts::PI * i as f32 / n as f32))
            .collect()
    }

    /// Increasing target speeds, hardest last.
    pub fn velocity_sequence(n: usize) -> Vec<TaskSpec> {
        (0..n).map(|i| TaskSpec::velocity(0.5 * (i + 1) as f32)).collect()
    }
}

/// Pure dynamics + reward: positions integrate the old velocity, then the
/// action accelerates the mass with the speed clipped to [`MAX_SPEED`], and
/// the reward is evaluated on the new velocity.
pub fn env_step(state: &[f32], action: &[f32], task: &TaskSpec) -> ([f32; 4], f32) {
    debug_assert!(action.iter().all(|a| a.abs() <= 1.0 + 1e-6));
    let (px, py, vx, vy) = (state[0], state[1], state[2], state[3]);
    let npx = px + vx * task.dt;
    let npy = py + vy * task.dt;
    let mut nvx = vx + action[0] * task.dt;
    let mut nvy = vy + action[1] * task.dt;
    let speed = (nvx * nvx + nvy * nvy).sqrt();
    if speed > MAX_SPEED {
        let shrink = MAX_SPEED / speed;
        nvx *= shrink;
        nvy *= shrink;
    }
    let reward = match task.family {
        TaskFamily::Direction => {
            nvx * task.parameter.cos() + nvy * task.parameter.sin()
        }
        TaskFamily::Velocity => {
            let s = (nvx * nvx + nvy * nvy).sqrt();
            -(s - task.parameter).abs()
        }
    };
    ([npx, npy, nvx, nvy], reward)
}

/// Stateful wrapper implementing the rollout environment contract.
#[derive(Debug, Clone)]
pub struct PointMassEnv {
    pub task: TaskSpec,
    state: [f32; 4],
}

impl PointMassEnv {
    pub fn new(task: TaskSpec) -> Self {
        PointMassEnv {
            task,
            state: [0.0; 4],
        }
    }
}

impl Environment for PointMassEnv {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    fn horizon(&self) -> usize {
        self.task.horizon
    }

    fn reset(&mut self, rng: &mut Rng) -> Vec<f32> {
        for s in self.state.iter_mut() {
            *s = rng.normal(0.0, INIT_JITTER);
        }
        self.state.to_vec()
    }

    fn step(&mut self, action: &[f32]) -> (Vec<f32>, f32) {
        let (next, reward) = env_step(&self.state, action, &self.task);
        self.state = next;
        (next.to_vec(), reward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_action_zero_velocity_is_a_fixed_point() {
        let task = TaskSpec::direction(0.7);
        let (next, reward) = env_step(&[1.0, 2.0, 0.0, 0.0], &[0.0, 0.0], &task);
        assert_eq!(next, [1.0, 2.0, 0.0, 0.0]);
        assert_eq!(reward, 0.0);
    }

    #[test]
    fn aligned_top_speed_gives_reward_two() {
        let theta = 0.3f32;
        let task = TaskSpec::direction(theta);
        let state = [0.0, 0.0, 2.0 * theta.cos(), 2.0 * theta.sin()];
        let (_, reward) = env_step(&state, &[0.0, 0.0], &task);
        assert!((reward - 2.0).abs() < 1e-5);
    }

    #[test]
    fn velocity_task_on_target_is_reward_zero() {
        let task = TaskSpec::velocity(1.5);
        let state = [0.0, 0.0, 1.5, 0.0];
        let (_, reward) = env_step(&state, &[0.0, 0.0], &task);
        assert!(reward.abs() < 1e-6);
    }

    #[test]
    fn rewards_stay_in_documented_ranges() {
        let dir = TaskSpec::direction(1.1);
        let vel = TaskSpec::velocity(1.0);
        let mut rng = Rng::new(3);
        let mut state = [0.0f32; 4];
        for _ in 0..500 {
            let action = [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)];
            let (next, r_dir) = env_step(&state, &action, &dir);
            let (_, r_vel) = env_step(&state, &action, &vel);
            assert!((-2.0..=2.0).contains(&r_dir));
            assert!((-(2.0 + 1.0)..=0.0).contains(&r_vel));
            let speed = (next[2] * next[2] + next[3] * next[3]).sqrt();
            assert!(speed <= MAX_SPEED + 1e-5);
            state = next;
        }
    }

    #[test]
    fn env_step_is_pure() {
        let task = TaskSpec::velocity(0.5);
        let state = [0.3, -0.2, 0.4, 0.1];
        let action = [0.5, -0.5];
        assert_eq!(env_step(&state, &action, &task), env_step(&state, &action, &task));
    }

    #[test]
    fn sequences_share_spaces_and_gamma() {
        for seq in [TaskSpec::direction_sequence(6), TaskSpec::velocity_sequence(4)] {
            for t in &seq {
                assert_eq!(t.horizon, 50);
                assert_eq!(t.gamma, 1.0);
            }
        }
        let v = TaskSpec::velocity_sequence(4);
        assert_eq!(v[0].parameter, 0.5);
        assert_eq!(v[3].parameter, 2.0);
    }
}
