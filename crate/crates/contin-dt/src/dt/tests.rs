//! Structural tests for the transformer: causality, padding masking,
//! parameter accounting, and a hand-traced tiny forward pass.

use super::model::{forward, param_count_for};
use super::*;
use crate::numerics::{Adam, AdamConfig, Rng, Tape, Tensor};

fn desk_cfg() -> DtConfig {
    let mut cfg = DtConfig::new(2, 1, 30);
    cfg.context_len = 4;
    cfg.n_layers = 2;
    cfg.embed_dim = 16;
    cfg.mlp_inner_dim = 16;
    cfg
}

fn random_window(cfg: &DtConfig, rng: &mut Rng, valid_len: usize) -> TrajectoryWindow {
    let mut w = TrajectoryWindow::empty(cfg);
    w.valid_len = valid_len;
    let start = rng.below(cfg.max_timestep.saturating_sub(cfg.context_len) + 1);
    for t in 0..valid_len {
        w.rtg[t] = rng.normal(0.0, 1.0);
        w.timesteps[t] = start + t;
        for j in 0..cfg.state_dim {
            w.states[t * cfg.state_dim + j] = rng.normal(0.0, 1.0);
        }
        for j in 0..cfg.action_dim {
            w.actions[t * cfg.action_dim + j] = rng.normal(0.0, 0.5).clamp(-1.0, 1.0);
        }
    }
    w
}

fn predictions(model: &DtModel, window: &TrajectoryWindow) -> (Vec<f32>, Vec<f32>, f32) {
    let batch = WindowBatch::from_windows(std::slice::from_ref(window), &model.cfg).unwrap();
    let mut tape = Tape::new();
    let out = forward(&mut tape, &model.store, &model.view, &model.cfg, &batch).unwrap();
    let loss = action_loss(&mut tape, out.pred_actions, &batch, false).unwrap();
    (
        tape.value(out.pred_actions).to_vec(),
        tape.value(out.hidden).to_vec(),
        tape.scalar_value(loss),
    )
}

#[test]
fn output_shapes_match_contract() {
    let cfg = desk_cfg();
    let mut rng = Rng::new(1);
    let model = DtModel::new(cfg.clone(), &mut rng).unwrap();
    let w = random_window(&cfg, &mut rng, cfg.context_len);
    let (pred, hidden, _) = predictions(&model, &w);
    assert_eq!(pred.len(), cfg.context_len * cfg.action_dim);
    assert_eq!(hidden.len(), cfg.context_len * cfg.embed_dim);
}

#[test]
fn k1_window_has_three_tokens() {
    let mut cfg = desk_cfg();
    cfg.context_len = 1;
    assert_eq!(cfg.token_len(), 3);
}

#[test]
fn predictions_bounded_by_action_bound() {
    let mut cfg = desk_cfg();
    cfg.action_bound = 0.7;
    let mut rng = Rng::new(2);
    let model = DtModel::new(cfg.clone(), &mut rng).unwrap();
    let w = random_window(&cfg, &mut rng, cfg.context_len);
    let (pred, _, _) = predictions(&model, &w);
    assert!(pred.iter().all(|p| p.abs() <= 0.7));
}

/// Perturbing any step's inputs leaves predictions at earlier state tokens
/// bit-identical.
#[test]
fn causality_is_bit_exact() {
    let cfg = desk_cfg();
    let mut rng = Rng::new(3);
    let model = DtModel::new(cfg.clone(), &mut rng).unwrap();
    for trial in 0..25 {
        let base = random_window(&cfg, &mut rng, cfg.context_len);
        let (pred_before, hidden_before, _) = predictions(&model, &base);

        // Perturb everything from step p onward.
        let p = 1 + rng.below(cfg.context_len - 1);
        let mut perturbed = base.clone();
        for t in p..cfg.context_len {
            perturbed.rtg[t] += rng.normal(0.0, 1.0);
            for j in 0..cfg.state_dim {
                perturbed.states[t * cfg.state_dim + j] += rng.normal(0.0, 1.0);
            }
            for j in 0..cfg.action_dim {
                perturbed.actions[t * cfg.action_dim + j] += rng.normal(0.0, 1.0);
            }
        }
        let (pred_after, hidden_after, _) = predictions(&model, &perturbed);
        for t in 0..p {
            for j in 0..cfg.action_dim {
                assert_eq!(
                    pred_before[t * cfg.action_dim + j],
                    pred_after[t * cfg.action_dim + j],
                    "trial {trial}: prediction at step {t} changed"
                );
            }
            for j in 0..cfg.embed_dim {
                assert_eq!(
                    hidden_before[t * cfg.embed_dim + j],
                    hidden_after[t * cfg.embed_dim + j],
                    "trial {trial}: hidden at step {t} changed"
                );
            }
        }
    }
}

/// Within one step the action token comes after the state token, so the
/// action prediction at step t must not depend on a_t itself.
#[test]
fn own_action_is_invisible_to_its_prediction() {
    let cfg = desk_cfg();
    let mut rng = Rng::new(4);
    let model = DtModel::new(cfg.clone(), &mut rng).unwrap();
    let base = random_window(&cfg, &mut rng, cfg.context_len);
    let t = cfg.context_len - 1;
    let (pred_before, _, _) = predictions(&model, &base);
    let mut perturbed = base;
    perturbed.actions[t * cfg.action_dim] = 0.9;
    let (pred_after, _, _) = predictions(&model, &perturbed);
    for j in 0..cfg.action_dim {
        assert_eq!(
            pred_before[t * cfg.action_dim + j],
            pred_after[t * cfg.action_dim + j]
        );
    }
}

/// The loss is invariant to whatever sits in the padding region.
#[test]
fn padding_content_cannot_leak_into_the_loss() {
    let cfg = desk_cfg();
    let mut rng = Rng::new(5);
    let model = DtModel::new(cfg.clone(), &mut rng).unwrap();
    for _ in 0..25 {
        let valid = 1 + rng.below(cfg.context_len - 1);
        let clean = random_window(&cfg, &mut rng, valid);
        let (_, _, loss_clean) = predictions(&model, &clean);

        let mut dirty = clean.clone();
        for t in valid..cfg.context_len {
            dirty.rtg[t] = rng.normal(0.0, 10.0);
            for j in 0..cfg.state_dim {
                dirty.states[t * cfg.state_dim + j] = rng.normal(0.0, 10.0);
            }
            for j in 0..cfg.action_dim {
                dirty.actions[t * cfg.action_dim + j] = rng.normal(0.0, 10.0);
            }
        }
        let (_, _, loss_dirty) = predictions(&model, &dirty);
        assert_eq!(loss_clean, loss_dirty);
    }
}

#[test]
fn param_count_matches_hand_count() {
    // K=2, 1 layer, h=8, d=8, state_dim=2, action_dim=1, max_timestep=9.
    let mut cfg = DtConfig::new(2, 1, 9);
    cfg.context_len = 2;
    cfg.n_layers = 1;
    cfg.embed_dim = 8;
    cfg.mlp_inner_dim = 8;

    // Hand count, term by term:
    //   rtg embed        8*1 + 8  = 16
    //   state embed      8*2 + 8  = 24
    //   action embed     8*1 + 8  = 16
    //   timestep table   10 * 8   = 80
    //   embed layernorm  2 * 8    = 16
    //   action head      1*8 + 1  = 9
    //   block: ln1 16, qkvo 4*(64+8)=288, ln2 16, mlp (64+8)+(64+8)=144
    let hand = 16 + 24 + 16 + 80 + 16 + 9 + (16 + 288 + 16 + 144);
    assert_eq!(param_count_for(&cfg), hand);

    let mut rng = Rng::new(6);
    let model = DtModel::new(cfg, &mut rng).unwrap();
    assert_eq!(model.param_count(), hand);
}

/// Single layer, single step: trace the whole forward pass with plain
/// loops, independent of the tape ops.
#[test]
fn single_token_forward_matches_hand_trace() {
    let mut cfg = DtConfig::new(2, 1, 4);
    cfg.context_len = 1;
    cfg.n_layers = 1;
    cfg.embed_dim = 4;
    cfg.mlp_inner_dim = 4;
    let mut rng = Rng::new(7);
    let model = DtModel::new(cfg.clone(), &mut rng).unwrap();

    let mut window = TrajectoryWindow::empty(&cfg);
    window.valid_len = 1;
    window.rtg[0] = 0.8;
    window.states = vec![0.3, -0.4];
    window.actions = vec![0.1];
    window.timesteps = vec![2];
    let (pred, _, _) = predictions(&model, &window);

    // Hand trace in f32 with the same operation semantics.
    let h = cfg.embed_dim;
    let value = |name: &str| -> Vec<f32> {
        model
            .store
            .iter()
            .find(|(_, p)| p.name == name)
            .unwrap_or_else(|| panic!("missing param {name}"))
            .1
            .value
            .data()
            .to_vec()
    };
    let lin = |w: &[f32], b: &[f32], x: &[f32]| -> Vec<f32> {
        let out = b.len();
        let inp = x.len();
        (0..out)
            .map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * x[i]).sum::<f32>())
            .collect()
    };
    let ln = |g: &[f32], b: &[f32], x: &[f32]| -> Vec<f32> {
        let d = x.len() as f32;
        let mean = x.iter().sum::<f32>() / d;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
        let inv = 1.0 / (var + 1e-5).sqrt();
        x.iter()
            .enumerate()
            .map(|(i, v)| g[i] * ((v - mean) * inv) + b[i])
            .collect()
    };

    let t_emb: Vec<f32> = value("head0.embed_timestep")[2 * h..3 * h].to_vec();
    let add = |a: Vec<f32>, b: &[f32]| -> Vec<f32> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
    let ln_g = value("head0.embed_ln.gain");
    let ln_b = value("head0.embed_ln.bias");
    let tok_r = ln(&ln_g, &ln_b, &add(lin(&value("head0.embed_rtg.w"), &value("head0.embed_rtg.b"), &[0.8]), &t_emb));
    let tok_s = ln(&ln_g, &ln_b, &add(lin(&value("head0.embed_state.w"), &value("head0.embed_state.b"), &[0.3, -0.4]), &t_emb));
    let tok_a = ln(&ln_g, &ln_b, &add(lin(&value("head0.embed_action.w"), &value("head0.embed_action.b"), &[0.1]), &t_emb));
    let mut tokens = [tok_r, tok_s, tok_a];

    // Attention: row i attends rows 0..=i of the normalized tokens.
    let g1 = value("trunk.block0.ln1.gain");
    let b1 = value("trunk.block0.ln1.bias");
    let normed: Vec<Vec<f32>> = tokens.iter().map(|t| ln(&g1, &b1, t)).collect();
    let q: Vec<Vec<f32>> = normed.iter().map(|x| lin(&value("trunk.block0.attn.q.w"), &value("trunk.block0.attn.q.b"), x)).collect();
    let k: Vec<Vec<f32>> = normed.iter().map(|x| lin(&value("trunk.block0.attn.k.w"), &value("trunk.block0.attn.k.b"), x)).collect();
    let v: Vec<Vec<f32>> = normed.iter().map(|x| lin(&value("trunk.block0.attn.v.w"), &value("trunk.block0.attn.v.b"), x)).collect();
    let scale = 1.0 / (h as f32).sqrt();
    for i in 0..3 {
        let logits: Vec<f32> = (0..=i)
            .map(|j| scale * q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f32>())
            .collect();
        let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f32 = exps.iter().sum();
        let mut ctx = vec![0.0f32; h];
        for (j, e) in exps.iter().enumerate() {
            for t in 0..h {
                ctx[t] += (e / z) * v[j][t];
            }
        }
        let proj = lin(&value("trunk.block0.attn.o.w"), &value("trunk.block0.attn.o.b"), &ctx);
        tokens[i] = add(tokens[i].clone(), &proj);
    }

    let g2 = value("trunk.block0.ln2.gain");
    let b2 = value("trunk.block0.ln2.bias");
    for i in 0..3 {
        let x = ln(&g2, &b2, &tokens[i]);
        let mid: Vec<f32> = lin(&value("trunk.block0.mlp.0.w"), &value("trunk.block0.mlp.0.b"), &x)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let out = lin(&value("trunk.block0.mlp.1.w"), &value("trunk.block0.mlp.1.b"), &mid);
        tokens[i] = add(tokens[i].clone(), &out);
    }

    let raw = lin(&value("head0.action.w"), &value("head0.action.b"), &tokens[1]);
    let expected = raw[0].tanh() * cfg.action_bound;
    assert!(
        (pred[0] - expected).abs() < 1e-5,
        "hand trace {expected} vs forward {}",
        pred[0]
    );
}

#[test]
fn embedding_locality_before_final_action() {
    // Two windows equal except the final action embed identically at all
    // tokens before that action token: check via hidden at earlier states.
    let cfg = desk_cfg();
    let mut rng = Rng::new(8);
    let model = DtModel::new(cfg.clone(), &mut rng).unwrap();
    let a = random_window(&cfg, &mut rng, cfg.context_len);
    let mut b = a.clone();
    let last = cfg.context_len - 1;
    b.actions[last * cfg.action_dim] = -0.77;
    let (pa, ha, _) = predictions(&model, &a);
    let (pb, hb, _) = predictions(&model, &b);
    assert_eq!(pa, pb, "final action must not affect any state-token output");
    assert_eq!(ha, hb);
}

/// Gradient of the full training loss with respect to a sampled
/// 16-parameter subset, against f64 central differences.
#[test]
fn full_model_gradient_passes_finite_differences() {
    let mut cfg = desk_cfg();
    cfg.context_len = 3;
    cfg.n_layers = 1;
    cfg.embed_dim = 8;
    cfg.mlp_inner_dim = 8;
    let mut rng = Rng::new(9);
    let model = DtModel::new(cfg.clone(), &mut rng).unwrap();
    let window = random_window(&cfg, &mut rng, 3);
    let batch = WindowBatch::from_windows(std::slice::from_ref(&window), &cfg).unwrap();

    let mut tape = Tape::new();
    let out = forward(&mut tape, &model.store, &model.view, &cfg, &batch).unwrap();
    let loss = action_loss(&mut tape, out.pred_actions, &batch, false).unwrap();
    tape.backward(loss).unwrap();
    let mut store = model.store.clone();
    store.clear_grads();
    tape.apply_grads(&mut store);

    // 16 sampled (parameter, component) coordinates across the model.
    let mut coords = Vec::new();
    let ids: Vec<_> = model.store.ids().collect();
    let mut pick = Rng::new(77);
    while coords.len() < 16 {
        let id = ids[pick.below(ids.len())];
        let n = model.store.value(id).numel();
        coords.push((id, pick.below(n)));
    }

    let eval = |id: crate::numerics::ParamId, i: usize, delta: f32| -> (f64, f64) {
        let mut s = model.store.clone();
        let v = s.value_mut(id).data_mut();
        let before = v[i];
        v[i] = before + delta;
        let realized = v[i] as f64;
        let mut t = Tape::new();
        let o = forward(&mut t, &s, &model.view, &cfg, &batch).unwrap();
        let l = action_loss(&mut t, o.pred_actions, &batch, false).unwrap();
        (t.eval_f64(l, None), realized)
    };

    let h_step = 1e-3f32;
    let mut pairs = Vec::new();
    for (id, i) in coords {
        let grad = store.value(id).grad().map(|g| g[i]).unwrap_or(0.0);
        let (f_plus, x_plus) = eval(id, i, h_step);
        let (f_minus, x_minus) = eval(id, i, -h_step);
        let numeric = ((f_plus - f_minus) / (x_plus - x_minus)) as f32;
        pairs.push((grad, numeric));
    }
    // Error floor at 0.1% of the loss gradient's dominant magnitude over
    // the whole parameter vector (sampled coordinates may all be tiny).
    let scale = store.ids().fold(0.0f32, |m, id| {
        store
            .value(id)
            .grad()
            .map(|g| g.iter().fold(m, |mm, v| mm.max(v.abs())))
            .unwrap_or(m)
    });
    let floor = (1e-3 * scale).max(1e-6);
    let mut worst = 0.0f32;
    for (a, n) in pairs {
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
    }
    assert!(worst <= 1e-3, "full-model rel err {worst}");
}

#[test]
fn loss_decreases_on_constant_action_data() {
    let cfg = desk_cfg();
    let mut rng = Rng::new(10);
    let mut model = DtModel::new(cfg.clone(), &mut rng).unwrap();
    let mut adam = Adam::new(AdamConfig {
        learning_rate: 1e-3,
        ..AdamConfig::default()
    });
    let opts = TrainOptions {
        batch_size: 8,
        loss_last_only: false,
    };
    let windows: Vec<TrajectoryWindow> = (0..8)
        .map(|_| {
            let mut w = random_window(&cfg, &mut rng, cfg.context_len);
            for v in w.actions.iter_mut() {
                *v = 0.5;
            }
            w
        })
        .collect();
    let first = train_step_single(&mut model, &windows, &mut adam, &opts).unwrap();
    let mut last = first;
    for _ in 0..99 {
        last = train_step_single(&mut model, &windows, &mut adam, &opts).unwrap();
    }
    assert!(
        last < 0.5 * first,
        "loss failed to decrease: {first} -> {last}"
    );
}

#[test]
fn duplicated_batch_keeps_the_loss() {
    let cfg = desk_cfg();
    let mut rng = Rng::new(11);
    let model = DtModel::new(cfg.clone(), &mut rng).unwrap();
    let w1 = random_window(&cfg, &mut rng, cfg.context_len);
    let w2 = random_window(&cfg, &mut rng, 2);
    let single = WindowBatch::from_windows(&[w1.clone(), w2.clone()], &cfg).unwrap();
    let doubled =
        WindowBatch::from_windows(&[w1.clone(), w2.clone(), w1, w2], &cfg).unwrap();
    let loss_of = |batch: &WindowBatch| -> f32 {
        let mut tape = Tape::new();
        let out = forward(&mut tape, &model.store, &model.view, &cfg, batch).unwrap();
        let loss = action_loss(&mut tape, out.pred_actions, batch, false).unwrap();
        tape.scalar_value(loss)
    };
    let a = loss_of(&single);
    let b = loss_of(&doubled);
    assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
}

#[test]
fn exact_predictions_give_zero_loss_and_only_decay_moves_params() {
    // When targets equal the model's own outputs the loss is exactly zero
    // and a fresh optimizer moves parameters only through weight decay.
    let cfg = desk_cfg();
    let mut rng = Rng::new(12);
    let mut model = DtModel::new(cfg.clone(), &mut rng).unwrap();
    let w = random_window(&cfg, &mut rng, cfg.context_len);
    let batch = WindowBatch::from_windows(std::slice::from_ref(&w), &cfg).unwrap();
    let mut tape = Tape::new();
    let out = forward(&mut tape, &model.store, &model.view, &cfg, &batch).unwrap();
    let pred_now = tape.value(out.pred_actions).to_vec();
    let target = tape.leaf(&Tensor::new(vec![cfg.context_len, cfg.action_dim], pred_now).unwrap());
    let loss = tape
        .mse_masked(out.pred_actions, target, batch.loss_weights(false))
        .unwrap();
    assert_eq!(tape.scalar_value(loss), 0.0);

    tape.backward(loss).unwrap();
    model.store.clear_grads();
    tape.apply_grads(&mut model.store);
    let lr = 1e-4f32;
    let wd = 1e-4f32;
    let before: Vec<Vec<f32>> = model
        .store
        .ids()
        .map(|id| model.store.value(id).data().to_vec())
        .collect();
    let mut adam = Adam::new(AdamConfig::default());
    adam.step(&mut model.store).unwrap();
    for (id, old) in model.store.ids().zip(&before) {
        let new = model.store.value(id).data();
        let had_grad = model.store.value(id).grad().is_some();
        for (n, o) in new.iter().zip(old) {
            if had_grad {
                let decayed = o - lr * wd * o;
                assert!((n - decayed).abs() <= 1e-7, "param moved beyond decay");
            } else {
                assert_eq!(n, o);
            }
        }
    }
}

#[test]
fn rollout_on_zero_reward_env_keeps_rtg_at_target() {
    struct ZeroEnv {
        t: usize,
    }
    impl Environment for ZeroEnv {
        fn state_dim(&self) -> usize {
            2
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn horizon(&self) -> usize {
            6
        }
        fn reset(&mut self, _rng: &mut Rng) -> Vec<f32> {
            self.t = 0;
            vec![0.0, 0.0]
        }
        fn step(&mut self, _action: &[f32]) -> (Vec<f32>, f32) {
            self.t += 1;
            (vec![self.t as f32, 0.0], 0.0)
        }
    }
    let cfg = desk_cfg();
    let mut rng = Rng::new(13);
    let model = DtModel::new(cfg.clone(), &mut rng).unwrap();
    let mut env = ZeroEnv { t: 0 };
    let ret = rollout(
        &model.store,
        &model.view,
        &cfg,
        &mut env,
        5.0,
        3,
        &Rng::new(99),
    )
    .unwrap();
    assert_eq!(ret, 0.0);

    // Determinism: same seed, same result (non-zero-reward path checked in
    // the tasks module; here the return is trivially stable).
    let ret2 = rollout(
        &model.store,
        &model.view,
        &cfg,
        &mut env,
        5.0,
        3,
        &Rng::new(99),
    )
    .unwrap();
    assert_eq!(ret, ret2);
}
