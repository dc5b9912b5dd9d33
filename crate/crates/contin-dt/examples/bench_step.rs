//! Quick training-step timing at candidate desk scales.

use contin_dt::dt::{train_step_single, DtConfig, DtModel, TrainOptions};
use contin_dt::numerics::{Adam, AdamConfig, Rng};
use contin_dt::tasks::{generate_dataset, sample_windows, Quality, TaskSpec, ACTION_DIM, STATE_DIM};
use std::time::Instant;

fn bench(k: usize, layers: usize, h: usize, batch: usize, steps: usize) {
    let task = TaskSpec::direction(0.5);
    let data = generate_dataset(&task, Quality::Expert, 50, 1);
    let mut cfg = DtConfig::new(STATE_DIM, ACTION_DIM, task.horizon);
    cfg.context_len = k;
    cfg.n_layers = layers;
    cfg.embed_dim = h;
    cfg.mlp_inner_dim = h;
    let mut rng = Rng::new(2);
    let mut model = DtModel::new(cfg, &mut rng).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    let opts = TrainOptions { batch_size: batch, loss_last_only: false };
    let mut data_rng = Rng::new(3);
    // warmup
    let w = sample_windows(&data, batch, k, STATE_DIM, ACTION_DIM, &mut data_rng).unwrap();
    train_step_single(&mut model, &w, &mut adam, &opts).unwrap();
    let t0 = Instant::now();
    for _ in 0..steps {
        let w = sample_windows(&data, batch, k, STATE_DIM, ACTION_DIM, &mut data_rng).unwrap();
        train_step_single(&mut model, &w, &mut adam, &opts).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / steps as f64;
    println!("K={k:2} layers={layers} h={h:3} batch={batch:3}  {:.1} ms/step  ({:.0} steps/s)", dt * 1e3, 1.0 / dt);
}

fn main() {
    bench(4, 2, 32, 64, 30);
    bench(4, 3, 32, 64, 30);
    bench(8, 3, 32, 64, 20);
    bench(4, 3, 64, 64, 20);
    bench(8, 3, 64, 64, 10);
    bench(20, 3, 128, 64, 5);
}
