//! Multi-head decision transformer: a shared transformer trunk with
//! per-task heads, trained per task alongside a standalone teacher whose
//! head is copied in, with a distillation objective toward the teacher and
//! selective rehearsal of the previous tasks least similar to it.

use crate::dt::{
    action_loss, forward, init_blocks, init_head, train_step_single, BlockIds, DtConfig, DtError,
    DtModel, DtView, HeadIds, TrainOptions, TrajectoryWindow, WindowBatch,
};
use crate::numerics::{cosine_similarity, Adam, AdamConfig, ParamStore, Rng, Tape, Tensor};
use crate::tasks::{
    build_replay_buffer, sample_windows, OfflineDataset, ReplayBuffer, TasksError,
};

/// Hyperparameters specific to the multi-head method.
#[derive(Debug, Clone)]
pub struct MhdtConfig {
    /// How many previous tasks are rehearsed (K in the selection rule).
    pub k_select: usize,
    /// Re-run task selection every this many steps (T).
    pub select_period: usize,
    /// Weight of the distillation objective (lambda_1).
    pub lambda_distill: f32,
    /// Weight of the rehearsal objective (lambda_2).
    pub lambda_rehearsal: f32,
    pub steps_per_task: usize,
    /// Replay buffer budget in transitions.
    pub buffer_capacity: usize,
}

impl Default for MhdtConfig {
    fn default() -> Self {
        MhdtConfig {
            k_select: 2,
            select_period: 10,
            lambda_distill: 0.5,
            lambda_rehearsal: 1.0,
            steps_per_task: 2000,
            buffer_capacity: 1000,
        }
    }
}

/// Shared trunk plus one head per started task.
#[derive(Debug, Clone)]
pub struct MultiHeadDt {
    pub cfg: DtConfig,
    pub store: ParamStore,
    pub blocks: Vec<BlockIds>,
    pub heads: Vec<HeadIds>,
}

impl MultiHeadDt {
    /// Trunk-only policy; heads are added as tasks start.
    pub fn new(cfg: DtConfig, rng: &mut Rng) -> Result<Self, DtError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let blocks = init_blocks(&mut store, rng, &cfg, "trunk");
        Ok(MultiHeadDt {
            cfg,
            store,
            blocks,
            heads: Vec::new(),
        })
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Registers and initializes a fresh head; returns its index.
    pub fn add_head(&mut self, rng: &mut Rng) -> usize {
        let idx = self.heads.len();
        let head = init_head(&mut self.store, rng, &self.cfg, &format!("head{idx}"));
        self.heads.push(head);
        idx
    }

    /// Single-policy view over (trunk, head i); architecturally identical to
    /// a standalone model.
    pub fn view(&self, head: usize) -> DtView {
        DtView {
            head: self.heads[head].clone(),
            blocks: self.blocks.clone(),
        }
    }

    /// Snapshot of every parameter value of one head.
    pub fn head_values(&self, head: usize) -> Vec<Vec<f32>> {
        self.heads[head]
            .all()
            .iter()
            .map(|id| self.store.value(*id).data().to_vec())
            .collect()
    }

    /// Snapshot of every trunk parameter value.
    pub fn trunk_values(&self) -> Vec<Vec<f32>> {
        self.blocks
            .iter()
            .flat_map(|b| {
                let mut ids = b.merge_set().to_vec();
                ids.extend(b.mlp_base());
                ids
            })
            .map(|id| self.store.value(id).data().to_vec())
            .collect()
    }
}

/// One teacher update; by construction this is exactly the single-task
/// training step.
pub fn teacher_step(
    teacher: &mut DtModel,
    windows: &[TrajectoryWindow],
    adam: &mut Adam,
    opts: &TrainOptions,
) -> Result<f32, DtError> {
    train_step_single(teacher, windows, adam, opts)
}

/// Overwrites head `n` of the policy with bit-exact copies of the teacher's
/// head parameters. The trunk and all other heads are untouched.
pub fn copy_head(teacher: &DtModel, mh: &mut MultiHeadDt, n: usize) {
    let src = teacher.view.head.all();
    let dst = mh.heads[n].all();
    for (s, d) in src.iter().zip(dst.iter()) {
        let data = teacher.store.value(*s).data().to_vec();
        mh.store.value_mut(*d).data_mut().copy_from_slice(&data);
    }
}

/// Teacher outputs captured for distillation: gradients never flow into
/// these, they enter the student graph as constants.
pub struct TeacherTargets {
    pub pred_actions: Tensor,
    pub hidden: Tensor,
}

/// Runs the teacher on a batch without gradients.
pub fn teacher_targets(teacher: &DtModel, batch: &WindowBatch) -> Result<TeacherTargets, DtError> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, &teacher.store, &teacher.view, &teacher.cfg, batch)?;
    let pred = Tensor::new(
        tape.shape(out.pred_actions).to_vec(),
        tape.value(out.pred_actions).to_vec(),
    )?;
    let hidden = Tensor::new(tape.shape(out.hidden).to_vec(), tape.value(out.hidden).to_vec())?;
    Ok(TeacherTargets {
        pred_actions: pred,
        hidden,
    })
}

/// Mean per-position cosine similarity between the hidden states produced by
/// head `j` and the teacher's, over one batch.
fn head_similarity(
    mh: &MultiHeadDt,
    head: usize,
    targets: &TeacherTargets,
    batch: &WindowBatch,
) -> Result<f64, DtError> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, &mh.store, &mh.view(head), &mh.cfg, batch)?;
    let hidden = tape.value(out.hidden);
    let teacher_hidden = targets.hidden.data();
    let h = mh.cfg.embed_dim;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (row, w) in batch.valid_mask.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        total += cosine_similarity(
            &hidden[row * h..(row + 1) * h],
            &teacher_hidden[row * h..(row + 1) * h],
        ) as f64;
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

/// Picks the `k_select` previous tasks whose hidden states are least similar
/// to the teacher's on a fresh batch of the current dataset. Ties break
/// toward the lower task index; the result is ordered by ascending
/// similarity.
pub fn select_tasks(
    mh: &MultiHeadDt,
    teacher: &DtModel,
    dataset: &OfflineDataset,
    n_previous: usize,
    k_select: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>, DtError> {
    let windows = sample_windows(
        dataset,
        batch_size,
        mh.cfg.context_len,
        mh.cfg.state_dim,
        mh.cfg.action_dim,
        rng,
    )
    .map_err(|e| DtError::InvalidConfig {
        reason: e.to_string(),
    })?;
    let batch = WindowBatch::from_windows(&windows, &mh.cfg)?;
    let targets = teacher_targets(teacher, &batch)?;
    let similarities: Vec<f64> = (0..n_previous)
        .map(|j| head_similarity(mh, j, &targets, &batch))
        .collect::<Result<_, _>>()?;
    Ok(least_similar(&similarities, k_select))
}

/// Indices of the `k_select` smallest similarities, ordered ascending, ties
/// broken toward the lower index.
pub fn least_similar(similarities: &[f64], k_select: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..similarities.len()).collect();
    order.sort_by(|&a, &b| {
        similarities[a]
            .partial_cmp(&similarities[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(k_select);
    order
}

/// The weighted three-part objective.
pub fn total_loss(predict: f32, distill: f32, rehearsal: f32, lambda1: f32, lambda2: f32) -> f32 {
    predict + lambda1 * distill + lambda2 * rehearsal
}

/// Component values of one student update.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepLosses {
    pub predict: f32,
    pub distill: f32,
    pub rehearsal: f32,
    pub total: f32,
}

/// One optimizer step on the whole policy: action prediction on the current
/// batch, distillation toward the teacher's outputs on the same batch, and
/// action cloning through the rehearsal heads on their buffer batches.
/// Zero-weighted terms are skipped entirely so they leave no gradient path.
pub fn student_step(
    mh: &mut MultiHeadDt,
    head: usize,
    windows: &[TrajectoryWindow],
    teacher: Option<&DtModel>,
    rehearsal: &[(usize, Vec<TrajectoryWindow>)],
    lambda_distill: f32,
    lambda_rehearsal: f32,
    adam: &mut Adam,
    opts: &TrainOptions,
) -> Result<StepLosses, DtError> {
    let batch = WindowBatch::from_windows(windows, &mh.cfg)?;
    let mut tape = Tape::new();
    let view = mh.view(head);
    let out = forward(&mut tape, &mh.store, &view, &mh.cfg, &batch)?;
    let predict = action_loss(&mut tape, out.pred_actions, &batch, opts.loss_last_only)?;
    let mut losses = StepLosses {
        predict: tape.scalar_value(predict),
        ..StepLosses::default()
    };
    let mut total = predict;

    if lambda_distill > 0.0 {
        let teacher = teacher.ok_or_else(|| DtError::InvalidConfig {
            reason: "distillation enabled without a teacher".into(),
        })?;
        if teacher.cfg.embed_dim != mh.cfg.embed_dim {
            return Err(DtError::InvalidConfig {
                reason: "teacher hidden width does not match the policy".into(),
            });
        }
        let targets = teacher_targets(teacher, &batch)?;
        let weights = batch.loss_weights(opts.loss_last_only);
        let pred_t = tape.leaf(&targets.pred_actions);
        let out_mse = tape.mse_masked(out.pred_actions, pred_t, weights.clone())?;
        let hid_t = tape.leaf(&targets.hidden);
        let hid_mse = tape.mse_masked(out.hidden, hid_t, weights)?;
        let distill = tape.add(out_mse, hid_mse)?;
        losses.distill = tape.scalar_value(distill);
        let weighted = tape.scale(distill, lambda_distill);
        total = tape.add(total, weighted)?;
    }

    if lambda_rehearsal > 0.0 && !rehearsal.is_empty() {
        let mut sum = None;
        for (j, buffer_windows) in rehearsal {
            let rb = WindowBatch::from_windows(buffer_windows, &mh.cfg)?;
            let rview = mh.view(*j);
            let rout = forward(&mut tape, &mh.store, &rview, &mh.cfg, &rb)?;
            let clone_loss = action_loss(&mut tape, rout.pred_actions, &rb, opts.loss_last_only)?;
            sum = Some(match sum {
                None => clone_loss,
                Some(s) => tape.add(s, clone_loss)?,
            });
        }
        let mean = tape.scale(sum.unwrap(), 1.0 / rehearsal.len() as f32);
        losses.rehearsal = tape.scalar_value(mean);
        let weighted = tape.scale(mean, lambda_rehearsal);
        total = tape.add(total, weighted)?;
    }

    losses.total = tape.scalar_value(total);
    mh.store.clear_grads();
    tape.backward(total)?;
    tape.apply_grads(&mut mh.store);
    adam.step(&mut mh.store)?;
    Ok(losses)
}

/// Artifacts of one task's training pass.
pub struct TaskOutcome {
    pub teacher: DtModel,
    pub buffer: ReplayBuffer,
    pub final_losses: StepLosses,
}

/// Full per-task training: a fresh teacher is trained concurrently (one
/// teacher step, head copy, then one policy step per iteration), the
/// rehearsal set is re-selected every `select_period` steps, and the task's
/// replay buffer is built at the end.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    mh: &mut MultiHeadDt,
    task_index: usize,
    dataset: &OfflineDataset,
    buffers: &[ReplayBuffer],
    mhcfg: &MhdtConfig,
    adam_cfg: &AdamConfig,
    opts: &TrainOptions,
    task_rng: &Rng,
    mut on_step: impl FnMut(usize, &mut MultiHeadDt),
) -> Result<TaskOutcome, DtError> {
    if buffers.len() < task_index {
        return Err(DtError::InvalidConfig {
            reason: format!(
                "task {task_index} needs {task_index} buffers, got {}",
                buffers.len()
            ),
        });
    }
    let mut teacher_init = task_rng.child("teacher-init");
    let mut teacher = DtModel::new(mh.cfg.clone(), &mut teacher_init)?;
    let mut head_init = task_rng.child("head-init");
    let head = mh.add_head(&mut head_init);
    debug_assert_eq!(head, task_index);

    let mut teacher_data = task_rng.child("teacher-data");
    let mut student_data = task_rng.child("student-data");
    let mut select_rng = task_rng.child("select");
    let mut rehearsal_rng = task_rng.child("rehearsal");
    let mut buffer_rng = task_rng.child("buffer");

    let mut teacher_adam = Adam::new(*adam_cfg);
    let mut student_adam = Adam::new(*adam_cfg);
    let mut selected: Vec<usize> = Vec::new();
    let mut final_losses = StepLosses::default();

    let k = mh.cfg.context_len;
    let sdim = mh.cfg.state_dim;
    let adim = mh.cfg.action_dim;
    let sample = |src: &mut Rng, data: &OfflineDataset, n: usize| {
        sample_windows(data, n, k, sdim, adim, src).map_err(|e: TasksError| DtError::InvalidConfig {
            reason: e.to_string(),
        })
    };

    for step in 0..mhcfg.steps_per_task {
        let tw = sample(&mut teacher_data, dataset, opts.batch_size)?;
        teacher_step(&mut teacher, &tw, &mut teacher_adam, opts)?;
        copy_head(&teacher, mh, head);

        if task_index > 0 && mhcfg.k_select > 0 && step % mhcfg.select_period == 0 {
            selected = select_tasks(
                mh,
                &teacher,
                dataset,
                task_index,
                mhcfg.k_select,
                opts.batch_size,
                &mut select_rng,
            )?;
        }

        let sw = sample(&mut student_data, dataset, opts.batch_size)?;
        let mut rehearsal = Vec::with_capacity(selected.len());
        if mhcfg.lambda_rehearsal > 0.0 {
            for &j in &selected {
                let windows = sample_windows(
                    &buffers[j],
                    opts.batch_size,
                    k,
                    sdim,
                    adim,
                    &mut rehearsal_rng,
                )
                .map_err(|e| DtError::InvalidConfig {
                    reason: e.to_string(),
                })?;
                rehearsal.push((j, windows));
            }
        }
        final_losses = student_step(
            mh,
            head,
            &sw,
            Some(&teacher),
            &rehearsal,
            mhcfg.lambda_distill,
            mhcfg.lambda_rehearsal,
            &mut student_adam,
            opts,
        )?;
        on_step(step, mh);
    }

    let buffer = build_replay_buffer(dataset, task_index, mhcfg.buffer_capacity, &mut buffer_rng)
        .map_err(|e| DtError::InvalidConfig {
            reason: e.to_string(),
        })?;
    Ok(TaskOutcome {
        teacher,
        buffer,
        final_losses,
    })
}
