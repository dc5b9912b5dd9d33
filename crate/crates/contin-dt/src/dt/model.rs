//! Model parameters and the causal transformer forward pass.
//!
//! Parameters live in a [`ParamStore`]; the structs here only carry ids, so
//! a multi-head policy can assemble "trunk + head n" views that are
//! architecturally identical to a standalone single-head model.

use super::{DtConfig, DtError, WindowBatch};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Value};

/// Per-task input/output parameters: modality embeddings, the timestep
/// table, the embedding layernorm, and the action-prediction linear.
#[derive(Debug, Clone)]
pub struct FrontIds {
    pub rtg_w: ParamId,
    pub rtg_b: ParamId,
    pub state_w: ParamId,
    pub state_b: ParamId,
    pub action_w: ParamId,
    pub action_b: ParamId,
    pub timestep_table: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

/// Low-rank adapter factors for one block MLP: the update is B*A added to
/// the frozen base weight.
#[derive(Debug, Clone)]
pub struct AdapterIds {
    pub a0: ParamId,
    pub b0: ParamId,
    pub a1: ParamId,
    pub b1: ParamId,
}

/// One transformer block: pre-norm attention and pre-norm MLP, both with
/// residual connections. `adapters`, when present, augments the MLP weights.
#[derive(Debug, Clone)]
pub struct BlockIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub mlp_w0: ParamId,
    pub mlp_b0: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub adapters: Option<AdapterIds>,
}

impl BlockIds {
    /// The frozen-after-task-1 MLP base tensors.
    pub fn mlp_base(&self) -> [ParamId; 4] {
        [self.mlp_w0, self.mlp_b0, self.mlp_w1, self.mlp_b1]
    }

    /// Every non-MLP, non-adapter parameter of the block.
    pub fn merge_set(&self) -> [ParamId; 12] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln2_gain,
            self.ln2_bias,
        ]
    }
}

/// Front embeddings plus the action-prediction linear.
#[derive(Debug, Clone)]
pub struct HeadIds {
    pub front: FrontIds,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl HeadIds {
    pub fn all(&self) -> [ParamId; 11] {
        [
            self.front.rtg_w,
            self.front.rtg_b,
            self.front.state_w,
            self.front.state_b,
            self.front.action_w,
            self.front.action_b,
            self.front.timestep_table,
            self.front.ln_gain,
            self.front.ln_bias,
            self.out_w,
            self.out_b,
        ]
    }
}

/// Assembled single-policy view: one head plus the transformer trunk.
#[derive(Debug, Clone)]
pub struct DtView {
    pub head: HeadIds,
    pub blocks: Vec<BlockIds>,
}

/// A standalone decision transformer owning its parameters.
#[derive(Debug, Clone)]
pub struct DtModel {
    pub cfg: DtConfig,
    pub store: ParamStore,
    pub view: DtView,
}

const INIT_STD: f32 = 0.02;

fn linear(store: &mut ParamStore, rng: &mut Rng, name: &str, out_dim: usize, in_dim: usize) -> (ParamId, ParamId) {
    let data: Vec<f32> = (0..out_dim * in_dim).map(|_| rng.normal(0.0, INIT_STD)).collect();
    let w = store.register(format!("{name}.w"), Tensor::new(vec![out_dim, in_dim], data).unwrap());
    let b = store.register(format!("{name}.b"), Tensor::zeros(vec![out_dim]));
    (w, b)
}

fn layernorm_params(store: &mut ParamStore, name: &str, dim: usize) -> (ParamId, ParamId) {
    let gain = store.register(
        format!("{name}.gain"),
        Tensor::new(vec![dim], vec![1.0; dim]).unwrap(),
    );
    let bias = store.register(format!("{name}.bias"), Tensor::zeros(vec![dim]));
    (gain, bias)
}

/// Registers and initializes the trunk blocks under `prefix`.
pub fn init_blocks(store: &mut ParamStore, rng: &mut Rng, cfg: &DtConfig, prefix: &str) -> Vec<BlockIds> {
    let h = cfg.embed_dim;
    let d = cfg.mlp_inner_dim;
    (0..cfg.n_layers)
        .map(|i| {
            let p = format!("{prefix}.block{i}");
            let (ln1_gain, ln1_bias) = layernorm_params(store, &format!("{p}.ln1"), h);
            let (wq, bq) = linear(store, rng, &format!("{p}.attn.q"), h, h);
            let (wk, bk) = linear(store, rng, &format!("{p}.attn.k"), h, h);
            let (wv, bv) = linear(store, rng, &format!("{p}.attn.v"), h, h);
            let (wo, bo) = linear(store, rng, &format!("{p}.attn.o"), h, h);
            let (ln2_gain, ln2_bias) = layernorm_params(store, &format!("{p}.ln2"), h);
            let (mlp_w0, mlp_b0) = linear(store, rng, &format!("{p}.mlp.0"), d, h);
            let (mlp_w1, mlp_b1) = linear(store, rng, &format!("{p}.mlp.1"), h, d);
            BlockIds {
                ln1_gain,
                ln1_bias,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_gain,
                ln2_bias,
                mlp_w0,
                mlp_b0,
                mlp_w1,
                mlp_b1,
                adapters: None,
            }
        })
        .collect()
}

/// Registers and initializes one head (front embeddings + action linear)
/// under `prefix`.
pub fn init_head(store: &mut ParamStore, rng: &mut Rng, cfg: &DtConfig, prefix: &str) -> HeadIds {
    let h = cfg.embed_dim;
    let (rtg_w, rtg_b) = linear(store, rng, &format!("{prefix}.embed_rtg"), h, 1);
    let (state_w, state_b) = linear(store, rng, &format!("{prefix}.embed_state"), h, cfg.state_dim);
    let (action_w, action_b) = linear(store, rng, &format!("{prefix}.embed_action"), h, cfg.action_dim);
    let rows = cfg.max_timestep + 1;
    let table: Vec<f32> = (0..rows * h).map(|_| rng.normal(0.0, INIT_STD)).collect();
    let timestep_table = store.register(
        format!("{prefix}.embed_timestep"),
        Tensor::new(vec![rows, h], table).unwrap(),
    );
    let (ln_gain, ln_bias) = layernorm_params(store, &format!("{prefix}.embed_ln"), h);
    let (out_w, out_b) = linear(store, rng, &format!("{prefix}.action"), cfg.action_dim, h);
    HeadIds {
        front: FrontIds {
            rtg_w,
            rtg_b,
            state_w,
            state_b,
            action_w,
            action_b,
            timestep_table,
            ln_gain,
            ln_bias,
        },
        out_w,
        out_b,
    }
}

impl DtModel {
    /// Fresh model; trunk parameters are registered before head parameters.
    pub fn new(cfg: DtConfig, rng: &mut Rng) -> Result<Self, DtError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let blocks = init_blocks(&mut store, rng, &cfg, "trunk");
        let head = init_head(&mut store, rng, &cfg, "head0");
        Ok(DtModel {
            cfg,
            store,
            view: DtView { head, blocks },
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.iter().map(|(_, p)| p.value.numel()).sum()
    }
}

/// Parameter count implied by a configuration (single head, no adapters).
pub fn param_count_for(cfg: &DtConfig) -> usize {
    let h = cfg.embed_dim;
    let d = cfg.mlp_inner_dim;
    let front = (h + h) // rtg embed
        + (h * cfg.state_dim + h)
        + (h * cfg.action_dim + h)
        + (cfg.max_timestep + 1) * h
        + 2 * h; // embedding layernorm
    let back = cfg.action_dim * h + cfg.action_dim;
    let block = 2 * h // ln1
        + 4 * (h * h + h) // q, k, v, o
        + 2 * h // ln2
        + (d * h + d) + (h * d + h); // mlp
    front + back + cfg.n_layers * block
}

/// Output handles of one forward pass.
pub struct ForwardOutput {
    /// [n*K, action_dim] squashed per-step action predictions, one per
    /// state token.
    pub pred_actions: Value,
    /// [n*K, h] final-block hidden vectors at the state-token positions.
    pub hidden: Value,
}

/// Runs the causal transformer over a window batch.
///
/// Token order per step is (return-to-go, state, action); the action at
/// step t is predicted from the hidden vector at the s_t token.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    view: &DtView,
    cfg: &DtConfig,
    batch: &WindowBatch,
) -> Result<ForwardOutput, DtError> {
    if batch.context_len != cfg.context_len {
        return Err(DtError::InvalidConfig {
            reason: "batch context length does not match the model".into(),
        });
    }
    for &t in &batch.timesteps {
        if t > cfg.max_timestep {
            return Err(DtError::TimestepOutOfRange {
                timestep: t,
                max: cfg.max_timestep,
            });
        }
    }
    let n = batch.n_windows;
    let k = batch.context_len;
    let token_len = 3 * k;
    let front = &view.head.front;

    // Modality embeddings plus the shared per-step timestep embedding.
    let rtg_in = tape.leaf(&batch.rtg);
    let state_in = tape.leaf(&batch.states);
    let action_in = tape.leaf(&batch.actions);
    let table = tape.param(store, front.timestep_table);
    let t_emb = tape.gather_rows(table, batch.timesteps.clone())?;

    let embed = |tape: &mut Tape, x: Value, w: ParamId, b: ParamId| -> Result<Value, DtError> {
        let wv = tape.param(store, w);
        let bv = tape.param(store, b);
        let y = tape.matmul_nt(x, wv)?;
        let y = tape.add_bias(y, bv)?;
        Ok(tape.add(y, t_emb)?)
    };
    let rtg_e = embed(tape, rtg_in, front.rtg_w, front.rtg_b)?;
    let state_e = embed(tape, state_in, front.state_w, front.state_b)?;
    let action_e = embed(tape, action_in, front.action_w, front.action_b)?;

    let mut tokens = tape.interleave3(rtg_e, state_e, action_e, k)?;
    let ln_g = tape.param(store, front.ln_gain);
    let ln_b = tape.param(store, front.ln_bias);
    tokens = tape.layernorm(tokens, ln_g, ln_b)?;

    for block in &view.blocks {
        // Pre-norm causal self-attention with residual.
        let g1 = tape.param(store, block.ln1_gain);
        let b1 = tape.param(store, block.ln1_bias);
        let x = tape.layernorm(tokens, g1, b1)?;
        let project = |tape: &mut Tape, w, b| -> Result<Value, DtError> {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let y = tape.matmul_nt(x, wv)?;
            Ok(tape.add_bias(y, bv)?)
        };
        let q = project(tape, block.wq, block.bq)?;
        let key = project(tape, block.wk, block.bk)?;
        let v = project(tape, block.wv, block.bv)?;
        let scores = tape.attn_scores(q, key, n, token_len, cfg.n_heads)?;
        let probs = tape.softmax_causal_batched(scores, n, token_len, cfg.n_heads)?;
        let ctx = tape.attn_context(probs, v, n, token_len, cfg.n_heads)?;
        let wo = tape.param(store, block.wo);
        let bo = tape.param(store, block.bo);
        let attn_out = tape.matmul_nt(ctx, wo)?;
        let attn_out = tape.add_bias(attn_out, bo)?;
        tokens = tape.add(tokens, attn_out)?;

        // Pre-norm MLP with residual.
        let g2 = tape.param(store, block.ln2_gain);
        let b2 = tape.param(store, block.ln2_bias);
        let x = tape.layernorm(tokens, g2, b2)?;
        let out = mlp_forward(tape, store, block, x)?;
        tokens = tape.add(tokens, out)?;
    }

    // State tokens sit at position 3t + 1 of each window.
    let mut state_rows = Vec::with_capacity(n * k);
    for w in 0..n {
        for t in 0..k {
            state_rows.push(w * token_len + 3 * t + 1);
        }
    }
    let hidden = tape.gather_rows(tokens, state_rows)?;

    let out_w = tape.param(store, view.head.out_w);
    let out_b = tape.param(store, view.head.out_b);
    let raw = tape.matmul_nt(hidden, out_w)?;
    let raw = tape.add_bias(raw, out_b)?;
    let squashed = tape.tanh(raw);
    let pred_actions = tape.scale(squashed, cfg.action_bound);

    Ok(ForwardOutput {
        pred_actions,
        hidden,
    })
}

/// One block MLP applied to token rows X[l, h]: the first layer maps h to
/// d, ReLU, then d back to h. When adapter factors are present each base
/// weight W is replaced by W + B*A with the base untouched.
pub fn mlp_forward(
    tape: &mut Tape,
    store: &ParamStore,
    block: &BlockIds,
    x: Value,
) -> Result<Value, DtError> {
    let w0 = effective_weight(tape, store, block.mlp_w0, block.adapters.as_ref().map(|a| (a.b0, a.a0)))?;
    let b0 = tape.param(store, block.mlp_b0);
    let mid = tape.matmul_nt(x, w0)?;
    let mid = tape.add_bias(mid, b0)?;
    let mid = tape.relu(mid);
    let w1 = effective_weight(tape, store, block.mlp_w1, block.adapters.as_ref().map(|a| (a.b1, a.a1)))?;
    let b1 = tape.param(store, block.mlp_b1);
    let out = tape.matmul_nt(mid, w1)?;
    Ok(tape.add_bias(out, b1)?)
}

/// Base weight, or base + B*A when adapter factors are given.
fn effective_weight(
    tape: &mut Tape,
    store: &ParamStore,
    base: ParamId,
    adapter: Option<(ParamId, ParamId)>,
) -> Result<Value, DtError> {
    let base_v = tape.param(store, base);
    match adapter {
        None => Ok(base_v),
        Some((b, a)) => {
            let bv = tape.param(store, b);
            let av = tape.param(store, a);
            let update = tape.matmul(bv, av)?;
            Ok(tape.add(base_v, update)?)
        }
    }
}
