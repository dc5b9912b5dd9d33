//! Scripted behavior policies at two data qualities.

use super::{TaskFamily, TaskSpec};
use crate::numerics::Rng;

/// Hand-written controller used to produce offline data. The expert variant
/// is deterministic; the middle variant mixes in Gaussian action noise and a
/// fraction of uniformly random steps.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub task: TaskSpec,
    pub noise_sigma: f32,
    pub random_prob: f64,
}

impl ScriptedPolicy {
    pub fn expert(task: TaskSpec) -> Self {
        ScriptedPolicy {
            task,
            noise_sigma: 0.0,
            random_prob: 0.0,
        }
    }

    pub fn middle(task: TaskSpec) -> Self {
        ScriptedPolicy {
            task,
            noise_sigma: 0.4,
            random_prob: 0.2,
        }
    }

    /// Expert action before any noise: full acceleration along the target
    /// heading, or proportional control (gain 1) on the speed error.
    fn expert_action(&self, state: &[f32]) -> [f32; 2] {
        match self.task.family {
            TaskFamily::Direction => [self.task.parameter.cos(), self.task.parameter.sin()],
            TaskFamily::Velocity => {
                let (vx, vy) = (state[2], state[3]);
                let speed = (vx * vx + vy * vy).sqrt();
                let err = self.task.parameter - speed;
                let (dx, dy) = if speed > 1e-6 {
                    (vx / speed, vy / speed)
                } else {
                    (1.0, 0.0)
                };
                [(err * dx).clamp(-1.0, 1.0), (err * dy).clamp(-1.0, 1.0)]
            }
        }
    }

    pub fn action(&self, state: &[f32], rng: &mut Rng) -> [f32; 2] {
        let mut a = self.expert_action(state);
        if self.noise_sigma > 0.0 {
            a[0] += rng.normal(0.0, self.noise_sigma);
            a[1] += rng.normal(0.0, self.noise_sigma);
        }
        if self.random_prob > 0.0 && rng.uniform() < self.random_prob {
            a = [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)];
        }
        [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]
    }
}
