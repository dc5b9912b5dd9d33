//! Penalty arithmetic, path-integral sign conventions, and the exact
//! equivalence of zero-strength regularizers with vanilla training.

use super::*;
use crate::dt::DtConfig;
use crate::numerics::Tensor;
use crate::tasks::{generate_dataset, Quality, TaskSpec, ACTION_DIM, STATE_DIM};

fn desk_cfg() -> DtConfig {
    let mut cfg = DtConfig::new(STATE_DIM, ACTION_DIM, 50);
    cfg.context_len = 3;
    cfg.n_layers = 1;
    cfg.embed_dim = 8;
    cfg.mlp_inner_dim = 8;
    cfg
}

fn opts() -> TrainOptions {
    TrainOptions {
        batch_size: 6,
        loss_last_only: false,
    }
}

fn probe_store(value: f32) -> (ParamStore, ParamId) {
    let mut store = ParamStore::new();
    let id = store.register("p", Tensor::new(vec![1], vec![value]).unwrap());
    (store, id)
}

#[test]
fn penalty_is_zero_at_the_anchor_and_with_zero_importance() {
    let (store, id) = probe_store(3.0);
    let anchored = ImportanceMap {
        weights: HashMap::from([(id.index(), vec![2.0])]),
        anchor: HashMap::from([(id.index(), vec![3.0])]),
    };
    assert_eq!(penalty_value(&[anchored], &store, 1.0), 0.0);

    let zero_f = ImportanceMap {
        weights: HashMap::from([(id.index(), vec![0.0])]),
        anchor: HashMap::from([(id.index(), vec![-100.0])]),
    };
    assert_eq!(penalty_value(&[zero_f], &store, 10.0), 0.0);
}

#[test]
fn penalty_scalar_probe() {
    // F = 2, theta - anchor = 3, lambda = 1 -> 18.
    let (store, id) = probe_store(3.0);
    let map = ImportanceMap {
        weights: HashMap::from([(id.index(), vec![2.0])]),
        anchor: HashMap::from([(id.index(), vec![0.0])]),
    };
    assert_eq!(penalty_value(&[map], &store, 1.0), 18.0);
}

#[test]
fn penalty_graph_matches_scalar_form_and_gradient() {
    let (store, id) = probe_store(1.5);
    let map = ImportanceMap {
        weights: HashMap::from([(id.index(), vec![2.5])]),
        anchor: HashMap::from([(id.index(), vec![0.5])]),
    };
    let maps = vec![map];
    let lambda = 0.7;
    let mut tape = Tape::new();
    let p = importance_penalty(&mut tape, &store, &maps, lambda)
        .unwrap()
        .unwrap();
    let v = tape.scalar_value(p);
    let expect = penalty_value(&maps, &store, lambda);
    assert!((v as f64 - expect).abs() < 1e-6);

    // d/dtheta lambda * F (theta - a)^2 = 2 lambda F (theta - a) = 3.5.
    let mut grads = store.clone();
    grads.clear_grads();
    tape.backward(p).unwrap();
    tape.apply_grads(&mut grads);
    let g = grads.value(id).grad().unwrap()[0];
    assert!((g - 2.0 * lambda * 2.5 * 1.0).abs() < 1e-6, "g = {g}");
}

#[test]
fn si_sign_convention_and_nonnegativity() {
    let (mut store, id) = probe_store(0.0);
    let mut si = SiAccumulator::new(&store, 1e-3);

    // One descent step: g = -1, delta = +0.1 -> omega contribution +0.1.
    let pre: HashMap<usize, Vec<f32>> = HashMap::from([(id.index(), vec![0.0])]);
    store.value_mut(id).accumulate_grad(&[-1.0]);
    store.value_mut(id).data_mut()[0] = 0.1;
    si.observe(&store, &pre);
    assert!((si.omega[&id.index()][0] - 0.1).abs() < 1e-7);

    // Random gradient-descent trajectory: omega stays >= 0, so Omega does.
    let mut rng = crate::numerics::Rng::new(5);
    let (mut store2, id2) = probe_store(0.0);
    let mut si2 = SiAccumulator::new(&store2, 1e-3);
    for _ in 0..100 {
        let g = rng.normal(0.0, 1.0);
        let pre = HashMap::from([(id2.index(), store2.value(id2).data().to_vec())]);
        store2.value_mut(id2).clear_grad();
        store2.value_mut(id2).accumulate_grad(&[g]);
        // Descent direction: delta = -lr * g.
        store2.value_mut(id2).data_mut()[0] -= 0.01 * g;
        si2.observe(&store2, &pre);
    }
    let map = si2.finish(&store2);
    assert!(map.nonnegative());
    assert!(map.weights[&id2.index()][0] >= 0.0);

    // Zero gradients throughout: omega stays zero, penalty zero.
    let (mut store3, id3) = probe_store(1.0);
    let mut si3 = SiAccumulator::new(&store3, 1e-3);
    for _ in 0..10 {
        let pre = HashMap::from([(id3.index(), store3.value(id3).data().to_vec())]);
        store3.value_mut(id3).clear_grad();
        store3.value_mut(id3).accumulate_grad(&[0.0]);
        store3.value_mut(id3).data_mut()[0] += 0.05;
        si3.observe(&store3, &pre);
    }
    let map3 = si3.finish(&store3);
    store3.value_mut(id3).data_mut()[0] = 42.0;
    assert_eq!(penalty_value(&[map3], &store3, 1.0), 0.0);
}

#[test]
fn zero_strength_regularizers_equal_vanilla_bit_for_bit() {
    let cfg = desk_cfg();
    let tasks = TaskSpec::direction_sequence(2);
    let datasets: Vec<_> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| generate_dataset(t, Quality::Expert, 5, 70 + i as u64))
        .collect();
    let adam_cfg = AdamConfig::default();
    let root = Rng::new(900);

    let run = |reg: Regularizer| -> Vec<Vec<f32>> {
        let mut init = Rng::new(31);
        let model = DtModel::new(cfg.clone(), &mut init).unwrap();
        let mut trainer = SequentialTrainer::new(model, reg, 6);
        for (i, d) in datasets.iter().enumerate() {
            trainer
                .train_task(d, &adam_cfg, &opts(), &root.child_indexed("task", i as u64), |_, _| {})
                .unwrap();
        }
        trainer
            .model
            .store
            .iter()
            .map(|(_, p)| p.value.data().to_vec())
            .collect()
    };

    let vanilla = run(Regularizer::None);
    let ewc0 = run(Regularizer::Ewc {
        lambda: 0.0,
        fisher_batches: 3,
    });
    let si0 = run(Regularizer::Si {
        coefficient: 0.0,
        damping: 1e-3,
    });
    assert_eq!(vanilla, ewc0, "zero-lambda quadratic penalty must be free");
    assert_eq!(vanilla, si0, "zero-coefficient path integral must be free");
}

#[test]
fn single_task_conformance_identical_losses() {
    let cfg = desk_cfg();
    let task = TaskSpec::velocity(1.0);
    let dataset = generate_dataset(&task, Quality::Expert, 5, 80);
    let adam_cfg = AdamConfig::default();
    let root = Rng::new(901);

    let run = |reg: Regularizer| -> f32 {
        let mut init = Rng::new(32);
        let model = DtModel::new(cfg.clone(), &mut init).unwrap();
        let mut trainer = SequentialTrainer::new(model, reg, 5);
        trainer
            .train_task(&dataset, &adam_cfg, &opts(), &root.child("task"), |_, _| {})
            .unwrap()
            .final_loss
    };
    let a = run(Regularizer::None);
    let b = run(Regularizer::Ewc {
        lambda: 100.0,
        fisher_batches: 2,
    });
    let c = run(Regularizer::Si {
        coefficient: 1.0,
        damping: 1e-3,
    });
    // No prior maps exist on the first task, so all three share the exact
    // same loss path.
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn regularized_training_actually_penalizes_drift() {
    // After one task, the EWC penalty grows as parameters drift.
    let cfg = desk_cfg();
    let task = TaskSpec::direction(0.0);
    let dataset = generate_dataset(&task, Quality::Expert, 5, 81);
    let mut init = Rng::new(33);
    let model = DtModel::new(cfg.clone(), &mut init).unwrap();
    let mut trainer = SequentialTrainer::new(
        model,
        Regularizer::Ewc {
            lambda: 10.0,
            fisher_batches: 3,
        },
        5,
    );
    let root = Rng::new(902);
    trainer
        .train_task(&dataset, &AdamConfig::default(), &opts(), &root.child("t0"), |_, _| {})
        .unwrap();
    assert_eq!(trainer.maps.len(), 1);
    assert!(trainer.maps[0].nonnegative());
    assert_eq!(penalty_value(&trainer.maps, &trainer.model.store, 10.0), 0.0);

    // Drift one parameter and watch the penalty become positive.
    let id = trainer.model.view.head.out_w;
    trainer.model.store.value_mut(id).data_mut()[0] += 1.0;
    assert!(penalty_value(&trainer.maps, &trainer.model.store, 10.0) > 0.0);
}
