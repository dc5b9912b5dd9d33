//! Continual baselines over the same model and loss path: plain sequential
//! fine-tuning, and the two classic parameter-importance regularizers
//! (Fisher-anchored quadratic penalties and path-integral importance).

use crate::dt::{
    action_loss, forward, DtError, DtModel, TrainOptions, WindowBatch,
};
use crate::numerics::{Adam, AdamConfig, ParamId, ParamStore, Rng, Tape, Value};
use crate::tasks::{sample_windows, OfflineDataset};
use std::collections::HashMap;

/// Per-parameter nonnegative importance weights plus the anchor the
/// penalty pulls toward.
#[derive(Debug, Clone)]
pub struct ImportanceMap {
    /// Importance per parameter component, keyed by parameter index.
    pub weights: HashMap<usize, Vec<f32>>,
    /// Parameter values at the anchor (task end).
    pub anchor: HashMap<usize, Vec<f32>>,
}

impl ImportanceMap {
    pub fn nonnegative(&self) -> bool {
        self.weights.values().all(|w| w.iter().all(|v| *v >= 0.0))
    }
}

/// Which anti-forgetting regularizer the sequential trainer applies.
#[derive(Debug, Clone)]
pub enum Regularizer {
    /// Plain sequential fine-tuning.
    None,
    /// Quadratic penalty around each finished task's parameters, weighted
    /// by a squared-gradient estimate of the Fisher diagonal.
    Ewc {
        lambda: f32,
        /// Batches used to estimate the Fisher diagonal at task end.
        fisher_batches: usize,
    },
    /// Path-integral importance accumulated every optimizer step.
    Si { coefficient: f32, damping: f32 },
}

/// Penalty value: lambda * sum_tasks sum_params F . (theta - anchor)^2,
/// added to the graph so its gradient flows into the parameters.
pub fn importance_penalty(
    tape: &mut Tape,
    store: &ParamStore,
    maps: &[ImportanceMap],
    lambda: f32,
) -> Result<Option<Value>, DtError> {
    if lambda == 0.0 || maps.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Value> = None;
    for map in maps {
        for id in store.ids() {
            let Some(weights) = map.weights.get(&id.index()) else {
                continue;
            };
            let anchor = &map.anchor[&id.index()];
            let theta = tape.param(store, id);
            let anchor_t = crate::numerics::Tensor::new(
                store.value(id).shape().to_vec(),
                anchor.clone(),
            )?;
            let anchor_v = tape.leaf(&anchor_t);
            let drift = tape.sub(theta, anchor_v)?;
            let sq = tape.mul(drift, drift)?;
            let w_t = crate::numerics::Tensor::new(
                store.value(id).shape().to_vec(),
                weights.clone(),
            )?;
            let w_v = tape.leaf(&w_t);
            let weighted = tape.mul(sq, w_v)?;
            let s = tape.sum(weighted);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
    }
    Ok(total.map(|t| tape.scale(t, lambda)))
}

/// Running path-integral state for one task.
pub struct SiAccumulator {
    /// omega: per-component accumulated -g * delta_theta.
    omega: HashMap<usize, Vec<f32>>,
    start: HashMap<usize, Vec<f32>>,
    damping: f32,
}

impl SiAccumulator {
    pub fn new(store: &ParamStore, damping: f32) -> Self {
        let start = store
            .iter()
            .map(|(id, p)| (id.index(), p.value.data().to_vec()))
            .collect();
        SiAccumulator {
            omega: HashMap::new(),
            start,
            damping,
        }
    }

    /// Called after each optimizer step with the pre-step snapshot; the
    /// gradients are still on the parameters.
    pub fn observe(&mut self, store: &ParamStore, pre_step: &HashMap<usize, Vec<f32>>) {
        for (id, p) in store.iter() {
            let Some(grad) = p.value.grad() else { continue };
            let Some(pre) = pre_step.get(&id.index()) else {
                continue;
            };
            let post = p.value.data();
            let omega = self
                .omega
                .entry(id.index())
                .or_insert_with(|| vec![0.0; post.len()]);
            for i in 0..post.len() {
                omega[i] += -grad[i] * (post[i] - pre[i]);
            }
        }
    }

    /// Converts the accumulated path integral into an importance map
    /// anchored at the current parameters.
    pub fn finish(self, store: &ParamStore) -> ImportanceMap {
        let mut weights = HashMap::new();
        let mut anchor = HashMap::new();
        for (id, p) in store.iter() {
            let end = p.value.data();
            anchor.insert(id.index(), end.to_vec());
            if let Some(omega) = self.omega.get(&id.index()) {
                let start = &self.start[&id.index()];
                let w: Vec<f32> = omega
                    .iter()
                    .zip(end.iter().zip(start))
                    .map(|(o, (e, s))| {
                        let drift = e - s;
                        (o / (drift * drift + self.damping)).max(0.0)
                    })
                    .collect();
                weights.insert(id.index(), w);
            }
        }
        ImportanceMap { weights, anchor }
    }
}

/// Estimates the Fisher diagonal as the mean squared gradient of the
/// prediction loss over `batches` fresh batches.
pub fn estimate_fisher(
    model: &DtModel,
    dataset: &OfflineDataset,
    batches: usize,
    opts: &TrainOptions,
    rng: &mut Rng,
) -> Result<ImportanceMap, DtError> {
    let cfg = &model.cfg;
    let mut sums: HashMap<usize, Vec<f32>> = HashMap::new();
    for _ in 0..batches {
        let windows = sample_windows(
            dataset,
            opts.batch_size,
            cfg.context_len,
            cfg.state_dim,
            cfg.action_dim,
            rng,
        )
        .map_err(|e| DtError::InvalidConfig {
            reason: e.to_string(),
        })?;
        let batch = WindowBatch::from_windows(&windows, cfg)?;
        let mut tape = Tape::new();
        let out = forward(&mut tape, &model.store, &model.view, cfg, &batch)?;
        let loss = action_loss(&mut tape, out.pred_actions, &batch, opts.loss_last_only)?;
        let mut grads = model.store.clone();
        grads.clear_grads();
        tape.backward(loss)?;
        tape.apply_grads(&mut grads);
        for (id, p) in grads.iter() {
            if let Some(g) = p.value.grad() {
                let acc = sums
                    .entry(id.index())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v * v;
                }
            }
        }
    }
    let scale = 1.0 / batches as f32;
    let weights: HashMap<usize, Vec<f32>> = sums
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|x| x * scale).collect()))
        .collect();
    let anchor = model
        .store
        .iter()
        .map(|(id, p)| (id.index(), p.value.data().to_vec()))
        .collect();
    Ok(ImportanceMap { weights, anchor })
}

/// Per-task training artifacts of the sequential baselines.
pub struct BaselineTaskReport {
    pub final_loss: f32,
}

/// Sequential trainer sharing the exact single-model forward/loss path;
/// the regularizer only adds a penalty term to the graph.
pub struct SequentialTrainer {
    pub model: DtModel,
    pub regularizer: Regularizer,
    pub maps: Vec<ImportanceMap>,
    pub steps_per_task: usize,
}

impl SequentialTrainer {
    pub fn new(model: DtModel, regularizer: Regularizer, steps_per_task: usize) -> Self {
        SequentialTrainer {
            model,
            regularizer,
            maps: Vec::new(),
            steps_per_task,
        }
    }

    fn penalty_lambda(&self) -> f32 {
        match &self.regularizer {
            Regularizer::None => 0.0,
            Regularizer::Ewc { lambda, .. } => *lambda,
            Regularizer::Si { coefficient, .. } => *coefficient,
        }
    }

    /// Trains one task in sequence.
    pub fn train_task(
        &mut self,
        dataset: &OfflineDataset,
        adam_cfg: &AdamConfig,
        opts: &TrainOptions,
        task_rng: &Rng,
        mut on_step: impl FnMut(usize, &DtModel),
    ) -> Result<BaselineTaskReport, DtError> {
        let cfg = self.model.cfg.clone();
        let mut data_rng = task_rng.child("student-data");
        let mut adam = Adam::new(*adam_cfg);
        let lambda = self.penalty_lambda();
        let mut si = match &self.regularizer {
            Regularizer::Si { damping, .. } => Some(SiAccumulator::new(&self.model.store, *damping)),
            _ => None,
        };
        let mut final_loss = 0.0;
        let track_si = si.is_some();

        for step in 0..self.steps_per_task {
            let windows = sample_windows(
                dataset,
                opts.batch_size,
                cfg.context_len,
                cfg.state_dim,
                cfg.action_dim,
                &mut data_rng,
            )
            .map_err(|e| DtError::InvalidConfig {
                reason: e.to_string(),
            })?;
            let batch = WindowBatch::from_windows(&windows, &cfg)?;
            let mut tape = Tape::new();
            let out = forward(&mut tape, &self.model.store, &self.model.view, &cfg, &batch)?;
            let predict = action_loss(&mut tape, out.pred_actions, &batch, opts.loss_last_only)?;
            let total = match importance_penalty(&mut tape, &self.model.store, &self.maps, lambda)? {
                Some(p) => tape.add(predict, p)?,
                None => predict,
            };
            final_loss = tape.scalar_value(total);
            self.model.store.clear_grads();
            tape.backward(total)?;
            tape.apply_grads(&mut self.model.store);

            let pre_step: Option<HashMap<usize, Vec<f32>>> = track_si.then(|| {
                self.model
                    .store
                    .iter()
                    .map(|(id, p)| (id.index(), p.value.data().to_vec()))
                    .collect()
            });
            adam.step(&mut self.model.store)?;
            if let (Some(si), Some(pre)) = (si.as_mut(), pre_step.as_ref()) {
                si.observe(&self.model.store, pre);
            }
            on_step(step, &self.model);
        }

        // Anchor the finished task for future penalties.
        match &self.regularizer {
            Regularizer::None => {}
            Regularizer::Ewc { fisher_batches, .. } => {
                let mut fisher_rng = task_rng.child("fisher");
                let map = estimate_fisher(
                    &self.model,
                    dataset,
                    *fisher_batches,
                    opts,
                    &mut fisher_rng,
                )?;
                self.maps.push(map);
            }
            Regularizer::Si { .. } => {
                let map = si.take().unwrap().finish(&self.model.store);
                self.maps.push(map);
            }
        }
        Ok(BaselineTaskReport { final_loss })
    }
}

/// Scalar form of the quadratic penalty, for direct verification.
pub fn penalty_value(maps: &[ImportanceMap], store: &ParamStore, lambda: f32) -> f64 {
    let mut total = 0.0f64;
    for map in maps {
        for id in store.ids() {
            let Some(w) = map.weights.get(&id.index()) else {
                continue;
            };
            let anchor = &map.anchor[&id.index()];
            for (i, v) in store.value(id).data().iter().enumerate() {
                let d = (v - anchor[i]) as f64;
                total += w[i] as f64 * d * d;
            }
        }
    }
    lambda as f64 * total
}

#[cfg(test)]
mod tests;
