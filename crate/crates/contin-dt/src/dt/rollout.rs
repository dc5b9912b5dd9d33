//! Autoregressive return-conditioned evaluation.

use super::model::{forward, DtView};
use super::{DtConfig, DtError, TrajectoryWindow, WindowBatch};
use crate::numerics::{ParamStore, Rng, Tape};

/// Episodic environment with a fixed horizon.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Starts a new episode and returns the initial state.
    fn reset(&mut self, rng: &mut Rng) -> Vec<f32>;
    /// Applies an action; returns the next state and the reward.
    fn step(&mut self, action: &[f32]) -> (Vec<f32>, f32);
}

/// Runs `n_episodes` evaluation episodes and returns the mean episode
/// return. The policy sees a sliding window of at most K steps; at each step
/// the current return-to-go is the target return minus the rewards obtained
/// so far.
pub fn rollout<E: Environment>(
    store: &ParamStore,
    view: &DtView,
    cfg: &DtConfig,
    env: &mut E,
    g_star: f64,
    n_episodes: usize,
    rng: &Rng,
) -> Result<f64, DtError> {
    let mut total = 0.0f64;
    for episode in 0..n_episodes {
        let mut episode_rng = rng.child_indexed("episode", episode as u64);
        total += rollout_episode(store, view, cfg, env, g_star, &mut episode_rng)?;
    }
    Ok(total / n_episodes as f64)
}

fn rollout_episode<E: Environment>(
    store: &ParamStore,
    view: &DtView,
    cfg: &DtConfig,
    env: &mut E,
    g_star: f64,
    rng: &mut Rng,
) -> Result<f64, DtError> {
    let k = cfg.context_len;
    let sdim = cfg.state_dim;
    let adim = cfg.action_dim;
    let mut states: Vec<f32> = Vec::new();
    let mut actions: Vec<f32> = Vec::new();
    let mut rtgs: Vec<f32> = Vec::new();
    let mut episode_return = 0.0f64;

    let mut state = env.reset(rng);
    for t in 0..env.horizon() {
        states.extend_from_slice(&state);
        rtgs.push((g_star - episode_return) as f32);
        // Placeholder for the not-yet-chosen action at the current step.
        actions.extend(std::iter::repeat(0.0).take(adim));

        let start = (t + 1).saturating_sub(k);
        let valid = t + 1 - start;
        let mut window = TrajectoryWindow::empty(cfg);
        for (pos, step) in (start..=t).enumerate() {
            window.rtg[pos] = rtgs[step];
            window.states[pos * sdim..(pos + 1) * sdim]
                .copy_from_slice(&states[step * sdim..(step + 1) * sdim]);
            window.actions[pos * adim..(pos + 1) * adim]
                .copy_from_slice(&actions[step * adim..(step + 1) * adim]);
            window.timesteps[pos] = step;
        }
        window.valid_len = valid;

        let batch = WindowBatch::from_windows(std::slice::from_ref(&window), cfg)?;
        let mut tape = Tape::new();
        let out = forward(&mut tape, store, view, cfg, &batch)?;
        let pred = tape.value(out.pred_actions);
        let row = valid - 1;
        let action: Vec<f32> = pred[row * adim..(row + 1) * adim].to_vec();

        let (next_state, reward) = env.step(&action);
        actions[t * adim..(t + 1) * adim].copy_from_slice(&action);
        episode_return += reward as f64;
        state = next_state;
    }
    Ok(episode_return)
}
