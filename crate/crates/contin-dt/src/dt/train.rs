//! Supervised action-prediction training.

use super::model::{forward, DtModel};
use super::{DtError, TrajectoryWindow, WindowBatch};
use crate::numerics::{Adam, Tape, Value};

/// Training-loop options shared by every method.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Supervise only the final action of each window instead of every
    /// valid position.
    pub loss_last_only: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 64,
            loss_last_only: false,
        }
    }
}

/// Mean-squared action-prediction loss over the window batch.
pub fn action_loss(
    tape: &mut Tape,
    pred: Value,
    batch: &WindowBatch,
    last_only: bool,
) -> Result<Value, DtError> {
    let target = tape.leaf(&batch.actions);
    let weights = batch.loss_weights(last_only);
    Ok(tape.mse_masked(pred, target, weights)?)
}

/// One optimizer step on a standalone model; returns the pre-step loss.
pub fn train_step_single(
    model: &mut DtModel,
    windows: &[TrajectoryWindow],
    adam: &mut Adam,
    opts: &TrainOptions,
) -> Result<f32, DtError> {
    let batch = WindowBatch::from_windows(windows, &model.cfg)?;
    let mut tape = Tape::new();
    let out = forward(&mut tape, &model.store, &model.view, &model.cfg, &batch)?;
    let loss = action_loss(&mut tape, out.pred_actions, &batch, opts.loss_last_only)?;
    let loss_value = tape.scalar_value(loss);
    model.store.clear_grads();
    tape.backward(loss)?;
    tape.apply_grads(&mut model.store);
    adam.step(&mut model.store)?;
    Ok(loss_value)
}
