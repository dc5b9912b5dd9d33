//! Low-rank-adapter continual learning: after the first task the block MLP
//! bases are frozen forever; each new task trains a standalone teacher,
//! merges every non-MLP weight toward it by convex interpolation, then
//! fine-tunes only rank-r adapter factors on the MLPs. The per-task adapter
//! sets are saved and swapped in to recover any earlier task's policy.

use crate::dt::{
    train_step_single, AdapterIds, DtConfig, DtError, DtModel, TrainOptions,
};
use crate::numerics::{Adam, AdamConfig, ParamId, Rng, Tensor};
use crate::tasks::{sample_windows, OfflineDataset};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct LoraConfig {
    /// Adapter rank r.
    pub rank: usize,
    /// Merge interpolation weight toward the new task's teacher.
    pub merge_weight: f32,
    pub steps_per_task: usize,
    /// Fraction of the per-task step budget spent training the teacher;
    /// the remainder fine-tunes the adapters.
    pub teacher_fraction: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            merge_weight: 0.2,
            steps_per_task: 2000,
            teacher_fraction: 0.5,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self, cfg: &DtConfig) -> Result<(), DtError> {
        if self.rank < 1 || self.rank > cfg.mlp_inner_dim.min(cfg.embed_dim) {
            return Err(DtError::InvalidConfig {
                reason: "rank must be in [1, min(d, h)]".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.merge_weight) {
            return Err(DtError::InvalidConfig {
                reason: "merge_weight must be in [0, 1]".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.teacher_fraction) {
            return Err(DtError::InvalidConfig {
                reason: "teacher_fraction must be in [0, 1]".into(),
            });
        }
        Ok(())
    }
}

/// Saved adapter factors of one task, one quadruple per block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub task_index: usize,
    /// Per block: (A0 [r, h], B0 [d, r], A1 [r, d], B1 [h, r]).
    pub blocks: Vec<(Tensor, Tensor, Tensor, Tensor)>,
}

impl AdapterSet {
    /// Total stored scalars; equals 2 * k * r * (h + d).
    pub fn element_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|(a0, b0, a1, b1)| a0.numel() + b0.numel() + a1.numel() + b1.numel())
            .sum()
    }
}

/// Adapter sets by task plus the base fingerprint they were saved against.
#[derive(Debug, Clone, Default)]
pub struct AdapterStore {
    pub sets: BTreeMap<usize, AdapterSet>,
    pub base_fingerprint: u64,
}

/// Scalars saved per task: 2 * k * r * (h + d).
pub fn memory_footprint(cfg: &DtConfig, lora: &LoraConfig) -> usize {
    2 * cfg.n_layers * lora.rank * (cfg.embed_dim + cfg.mlp_inner_dim)
}

/// FNV-1a over the little-endian bytes of every non-adapter parameter.
pub fn base_fingerprint(model: &DtModel) -> u64 {
    let adapter_ids: Vec<ParamId> = model
        .view
        .blocks
        .iter()
        .filter_map(|b| b.adapters.as_ref())
        .flat_map(|a| [a.a0, a.b0, a.a1, a.b1])
        .collect();
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for (id, param) in model.store.iter() {
        if adapter_ids.contains(&id) {
            continue;
        }
        for v in param.value.data() {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
    }
    h
}

/// Registers adapter factors on every block (A ~ N(0, 0.02^2), B = 0), so
/// the initial update is exactly zero.
pub fn add_adapters(model: &mut DtModel, rank: usize, rng: &mut Rng) {
    let h = model.cfg.embed_dim;
    let d = model.cfg.mlp_inner_dim;
    for (i, block) in model.view.blocks.iter_mut().enumerate() {
        let p = format!("trunk.block{i}.mlp");
        let a0_data: Vec<f32> = (0..rank * h).map(|_| rng.normal(0.0, 0.02)).collect();
        let a0 = model
            .store
            .register(format!("{p}.lora_a0"), Tensor::new(vec![rank, h], a0_data).unwrap());
        let b0 = model
            .store
            .register(format!("{p}.lora_b0"), Tensor::zeros(vec![d, rank]));
        let a1_data: Vec<f32> = (0..rank * d).map(|_| rng.normal(0.0, 0.02)).collect();
        let a1 = model
            .store
            .register(format!("{p}.lora_a1"), Tensor::new(vec![rank, d], a1_data).unwrap());
        let b1 = model
            .store
            .register(format!("{p}.lora_b1"), Tensor::zeros(vec![h, rank]));
        block.adapters = Some(AdapterIds { a0, b0, a1, b1 });
    }
}

/// Re-draws A and zeroes B on the existing adapter parameters.
pub fn init_adapters(model: &mut DtModel, rng: &mut Rng) {
    for block in model.view.blocks.clone() {
        let ids = block.adapters.expect("adapters not registered");
        for (id, gaussian) in [(ids.a0, true), (ids.b0, false), (ids.a1, true), (ids.b1, false)] {
            let data = model.store.value_mut(id).data_mut();
            if gaussian {
                for v in data.iter_mut() {
                    *v = rng.normal(0.0, 0.02);
                }
            } else {
                data.fill(0.0);
            }
        }
    }
}

/// Interpolates every parameter except the block MLP bases and adapters
/// toward the teacher: theta <- (1 - weight) * theta + weight * teacher.
/// The endpoints are exact: weight 0 is a no-op and weight 1 copies.
pub fn merge_weights(model: &mut DtModel, teacher: &DtModel, weight: f32) -> Result<(), DtError> {
    let dst_ids = merge_param_ids(model);
    let src_ids = merge_param_ids(teacher);
    if dst_ids.len() != src_ids.len() {
        return Err(DtError::InvalidConfig {
            reason: "merge: architectures differ".into(),
        });
    }
    if weight == 0.0 {
        return Ok(());
    }
    for (dst, src) in dst_ids.into_iter().zip(src_ids) {
        let s = teacher.store.value(src);
        let d = model.store.value(dst);
        if s.shape() != d.shape() {
            return Err(DtError::InvalidConfig {
                reason: format!(
                    "merge: shape mismatch on `{}`",
                    model.store.name(dst)
                ),
            });
        }
        let merged: Vec<f32> = if weight == 1.0 {
            s.data().to_vec()
        } else {
            d.data()
                .iter()
                .zip(s.data())
                .map(|(a, b)| (1.0 - weight) * a + weight * b)
                .collect()
        };
        model.store.value_mut(dst).data_mut().copy_from_slice(&merged);
    }
    Ok(())
}

/// Everything the merge touches: head front/back and each block's
/// layernorms and attention projections.
fn merge_param_ids(model: &DtModel) -> Vec<ParamId> {
    let mut ids: Vec<ParamId> = model.view.head.all().to_vec();
    for block in &model.view.blocks {
        ids.extend(block.merge_set());
    }
    ids
}

/// Captures the current adapter values as the saved set of `task_index`.
pub fn snapshot_adapters(model: &DtModel, task_index: usize) -> AdapterSet {
    let blocks = model
        .view
        .blocks
        .iter()
        .map(|b| {
            let ids = b.adapters.as_ref().expect("adapters not registered");
            (
                model.store.value(ids.a0).clone(),
                model.store.value(ids.b0).clone(),
                model.store.value(ids.a1).clone(),
                model.store.value(ids.b1).clone(),
            )
        })
        .collect();
    AdapterSet { task_index, blocks }
}

fn write_adapter_values(model: &mut DtModel, set: &AdapterSet) {
    for (block, (a0, b0, a1, b1)) in model.view.blocks.clone().iter().zip(&set.blocks) {
        let ids = block.adapters.as_ref().expect("adapters not registered");
        for (id, t) in [(ids.a0, a0), (ids.b0, b0), (ids.a1, a1), (ids.b1, b1)] {
            model
                .store
                .value_mut(id)
                .data_mut()
                .copy_from_slice(t.data());
        }
    }
}

/// Replaces the live adapter values with a saved set. Everything else is
/// untouched.
pub fn swap_adapters(model: &mut DtModel, store: &AdapterStore, task_index: usize) -> Result<(), DtError> {
    let set = store.sets.get(&task_index).ok_or_else(|| DtError::InvalidConfig {
        reason: format!("no adapter set saved for task {task_index}"),
    })?;
    if set.blocks.len() != model.view.blocks.len() {
        return Err(DtError::InvalidConfig {
            reason: "adapter set block count mismatch".into(),
        });
    }
    write_adapter_values(model, set);
    Ok(())
}

/// The continual learner: a single base model, its adapter library, and the
/// index of the adapters currently swapped in.
pub struct LoraDt {
    pub model: DtModel,
    pub cfg: LoraConfig,
    pub adapters: AdapterStore,
    pub active_task: Option<usize>,
}

impl LoraDt {
    pub fn new(dt_cfg: DtConfig, cfg: LoraConfig, rng: &mut Rng) -> Result<Self, DtError> {
        cfg.validate(&dt_cfg)?;
        let model = DtModel::new(dt_cfg, rng)?;
        Ok(LoraDt {
            model,
            cfg,
            adapters: AdapterStore::default(),
            active_task: None,
        })
    }

    fn adapter_ids(&self) -> Vec<ParamId> {
        self.model
            .view
            .blocks
            .iter()
            .filter_map(|b| b.adapters.as_ref())
            .flat_map(|a| [a.a0, a.b0, a.a1, a.b1])
            .collect()
    }

    /// Freezes every non-adapter parameter; from task 1 on, only adapter
    /// factors ever receive gradients.
    fn freeze_base(&mut self) {
        let adapters = self.adapter_ids();
        for id in self.model.store.ids().collect::<Vec<_>>() {
            self.model.store.set_frozen(id, !adapters.contains(&id));
        }
    }

    /// Swaps in the saved adapters of `task_index` (the base stays as-is).
    pub fn activate_task(&mut self, task_index: usize) -> Result<(), DtError> {
        if self.active_task == Some(task_index) {
            return Ok(());
        }
        swap_adapters(&mut self.model, &self.adapters, task_index)?;
        self.active_task = Some(task_index);
        Ok(())
    }

    /// Runs `f` against the model addressing `task_index`: a saved set is
    /// swapped in for the duration (and the live values restored after);
    /// unsaved tasks evaluate with whatever adapters are live, which is the
    /// most recent set.
    pub fn eval_with_task<R>(
        &mut self,
        task_index: usize,
        f: impl FnOnce(&DtModel) -> R,
    ) -> Result<R, DtError> {
        if !self.adapters.sets.contains_key(&task_index) || self.active_task == Some(task_index) {
            return Ok(f(&self.model));
        }
        let live = snapshot_adapters(&self.model, usize::MAX);
        swap_adapters(&mut self.model, &self.adapters, task_index)?;
        let result = f(&self.model);
        write_adapter_values(&mut self.model, &live);
        Ok(result)
    }

    /// Trains one task. Task 0 is full-parameter training of the base with
    /// zero-update adapters saved; later tasks train a fresh teacher for
    /// `teacher_fraction` of the budget, merge once, re-initialize the
    /// adapters, and fine-tune only them for the remaining steps.
    #[allow(clippy::too_many_arguments)]
    pub fn train_task(
        &mut self,
        task_index: usize,
        dataset: &OfflineDataset,
        adam_cfg: &AdamConfig,
        opts: &TrainOptions,
        task_rng: &Rng,
        mut on_step: impl FnMut(usize, &mut Self),
    ) -> Result<Option<DtModel>, DtError> {
        let k = self.model.cfg.context_len;
        let sdim = self.model.cfg.state_dim;
        let adim = self.model.cfg.action_dim;
        let steps = self.cfg.steps_per_task;
        if task_index == 0 {
            let mut data_rng = task_rng.child("student-data");
            let mut adam = Adam::new(*adam_cfg);
            for step in 0..steps {
                let windows = sample_windows(dataset, opts.batch_size, k, sdim, adim, &mut data_rng)
                    .map_err(|e| DtError::InvalidConfig { reason: e.to_string() })?;
                train_step_single(&mut self.model, &windows, &mut adam, opts)?;
                on_step(step, self);
            }
            let mut adapter_rng = task_rng.child("adapter-init");
            add_adapters(&mut self.model, self.cfg.rank, &mut adapter_rng);
            self.freeze_base();
            let set = snapshot_adapters(&self.model, 0);
            self.adapters.sets.insert(0, set);
            self.adapters.base_fingerprint = base_fingerprint(&self.model);
            self.active_task = Some(0);
            return Ok(None);
        }

        let teacher_steps = (steps as f32 * self.cfg.teacher_fraction).round() as usize;
        let mut teacher_init = task_rng.child("teacher-init");
        let mut teacher = DtModel::new(self.model.cfg.clone(), &mut teacher_init)?;
        let mut teacher_adam = Adam::new(*adam_cfg);
        let mut teacher_data = task_rng.child("teacher-data");
        for step in 0..teacher_steps {
            let windows =
                sample_windows(dataset, opts.batch_size, k, sdim, adim, &mut teacher_data)
                    .map_err(|e| DtError::InvalidConfig { reason: e.to_string() })?;
            train_step_single(&mut teacher, &windows, &mut teacher_adam, opts)?;
            on_step(step, self);
        }

        merge_weights(&mut self.model, &teacher, self.cfg.merge_weight)?;
        let mut adapter_rng = task_rng.child("adapter-init");
        init_adapters(&mut self.model, &mut adapter_rng);

        let mut adam = Adam::new(*adam_cfg);
        let mut data_rng = task_rng.child("student-data");
        for step in teacher_steps..steps {
            let windows = sample_windows(dataset, opts.batch_size, k, sdim, adim, &mut data_rng)
                .map_err(|e| DtError::InvalidConfig { reason: e.to_string() })?;
            train_step_single(&mut self.model, &windows, &mut adam, opts)?;
            on_step(step, self);
        }

        let set = snapshot_adapters(&self.model, task_index);
        self.adapters.sets.insert(task_index, set);
        self.adapters.base_fingerprint = base_fingerprint(&self.model);
        self.active_task = Some(task_index);
        Ok(Some(teacher))
    }
}
