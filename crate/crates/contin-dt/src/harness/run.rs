//! The generate / train / report commands.

use super::checkpoint::{encode, save_checkpoint, CheckpointEntry};
use super::config::{Method, RunConfig};
use super::dataset_io::{read_dataset, write_dataset};
use super::HarnessError;
use crate::baselines::{Regularizer, SequentialTrainer};
use crate::dt::{rollout, DtConfig, DtModel, DtView};
use crate::lora::{memory_footprint, LoraDt};
use crate::metrics::{bwt, dg, fwt, per, PerformanceMatrix};
use crate::mhdt::{train_task as train_task_mhdt, MultiHeadDt};
use crate::numerics::{ParamStore, Rng};
use crate::tasks::{OfflineDataset, PointMassEnv, ReplayBuffer, TaskSpec};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Locations of one run's artifacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub run_dir: PathBuf,
}

fn dataset_path(cfg: &RunConfig, task_index: usize) -> PathBuf {
    Path::new(&cfg.data_dir).join(format!(
        "{}_task{}_{}.jsonl",
        cfg.family.name(),
        task_index,
        cfg.quality.name()
    ))
}

/// Generates one dataset file per task at the configured quality and
/// prints the transition counts.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(&cfg.data_dir)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", cfg.data_dir)))?;
    let root = Rng::new(cfg.dataset_seed);
    let mut written = Vec::new();
    for (i, task) in cfg.tasks().iter().enumerate() {
        let seed = root.child_indexed("task", i as u64).seed();
        let dataset = crate::tasks::generate_dataset(task, cfg.quality, cfg.n_traj, seed);
        let path = dataset_path(cfg, i);
        write_dataset(&path, &dataset)?;
        println!(
            "{}: {} trajectories, {} transitions",
            path.display(),
            dataset.trajectories.len(),
            dataset.transition_count()
        );
        written.push(path);
    }
    Ok(written)
}

fn load_datasets(cfg: &RunConfig) -> Result<Vec<OfflineDataset>, HarnessError> {
    let tasks = cfg.tasks();
    let mut datasets = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let path = dataset_path(cfg, i);
        let dataset = read_dataset(&path)?;
        if dataset.task != *task || dataset.quality != cfg.quality {
            return Err(HarnessError::Config(format!(
                "{}: dataset does not match the configured task sequence",
                path.display()
            )));
        }
        if dataset.trajectories.len() != cfg.n_traj {
            return Err(HarnessError::Config(format!(
                "{}: expected {} trajectories, found {}",
                path.display(),
                cfg.n_traj,
                dataset.trajectories.len()
            )));
        }
        datasets.push(dataset);
    }
    Ok(datasets)
}

fn eval_return(
    store: &ParamStore,
    view: &DtView,
    dt_cfg: &DtConfig,
    task: &TaskSpec,
    g_star: f64,
    episodes: usize,
    rng: &Rng,
) -> Result<f64, HarnessError> {
    let mut env = PointMassEnv::new(task.clone());
    rollout(store, view, dt_cfg, &mut env, g_star, episodes, rng).map_err(HarnessError::from)
}

struct CurveRow {
    step: usize,
    task: usize,
    ret: f64,
}

/// Everything cmd_train leaves behind in memory for tests.
pub struct RunSummary {
    pub matrix: PerformanceMatrix,
    pub metrics_json: String,
    pub run_dir: PathBuf,
}

/// Trains `method` over the task sequence with one seed, evaluating all
/// tasks every `eval_interval` steps for the learning curves and after each
/// task for the performance matrix, then writes checkpoints, buffers or
/// adapters, and the report files.
pub fn cmd_train(cfg: &RunConfig, method: Method, seed: u64) -> Result<RunSummary, HarnessError> {
    let datasets = load_datasets(cfg)?;
    let tasks = cfg.tasks();
    let n_tasks = tasks.len();
    let dt_cfg = cfg.dt_config();
    let adam_cfg = cfg.adam_config();
    let opts = cfg.train_options();
    let g_star: Vec<f64> = datasets.iter().map(|d| d.max_return()).collect();

    let run_dir = Path::new(&cfg.out_dir).join(format!("{}_seed{}", method.name(), seed));
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", run_dir.display())))?;

    let run_rng = Rng::new(seed);
    let eval_rngs: Vec<Rng> = (0..n_tasks)
        .map(|j| run_rng.child_indexed("eval-task", j as u64))
        .collect();

    // Random-initialization baseline, before any training.
    let mut baseline_rng = run_rng.child("baseline-init");
    let baseline_model = DtModel::new(dt_cfg.clone(), &mut baseline_rng)?;
    let mut random_baseline = Vec::with_capacity(n_tasks);
    for j in 0..n_tasks {
        random_baseline.push(eval_return(
            &baseline_model.store,
            &baseline_model.view,
            &dt_cfg,
            &tasks[j],
            g_star[j],
            cfg.eval_episodes,
            &eval_rngs[j],
        )?);
    }

    let mut curve: Vec<CurveRow> = Vec::new();
    let mut matrix = PerformanceMatrix::new(n_tasks);
    matrix.random_baseline = random_baseline;
    let mut teacher_returns: Vec<f64> = Vec::new();

    match method {
        Method::Vanilla | Method::Ewc | Method::Si => {
            let regularizer = match method {
                Method::Ewc => Regularizer::Ewc {
                    lambda: cfg.ewc_lambda,
                    fisher_batches: cfg.ewc_fisher_batches,
                },
                Method::Si => Regularizer::Si {
                    coefficient: cfg.si_coefficient,
                    damping: cfg.si_damping,
                },
                _ => Regularizer::None,
            };
            let mut init_rng = run_rng.child("model-init");
            let model = DtModel::new(dt_cfg.clone(), &mut init_rng)?;
            let mut trainer = SequentialTrainer::new(model, regularizer, cfg.steps_per_task);
            for i in 0..n_tasks {
                let task_rng = run_rng.child_indexed("task", i as u64);
                let base_step = i * cfg.steps_per_task;
                let mut eval_err = None;
                trainer.train_task(&datasets[i], &adam_cfg, &opts, &task_rng, |step, model| {
                    if (step + 1) % cfg.eval_interval == 0 && eval_err.is_none() {
                        for j in 0..n_tasks {
                            match eval_return(
                                &model.store,
                                &model.view,
                                &dt_cfg,
                                &tasks[j],
                                g_star[j],
                                cfg.eval_episodes,
                                &eval_rngs[j],
                            ) {
                                Ok(ret) => curve.push(CurveRow {
                                    step: base_step + step + 1,
                                    task: j,
                                    ret,
                                }),
                                Err(e) => eval_err = Some(e),
                            }
                        }
                    }
                })?;
                if let Some(e) = eval_err {
                    return Err(e);
                }
                for j in 0..n_tasks {
                    matrix.returns[i][j] = eval_return(
                        &trainer.model.store,
                        &trainer.model.view,
                        &dt_cfg,
                        &tasks[j],
                        g_star[j],
                        cfg.eval_episodes,
                        &eval_rngs[j],
                    )?;
                }
            }
            save_checkpoint(&run_dir.join("model.cdt"), &trainer.model.store)?;
        }
        Method::Mhdt => {
            let mut init_rng = run_rng.child("model-init");
            let mut mh = MultiHeadDt::new(dt_cfg.clone(), &mut init_rng)?;
            let mhcfg = cfg.mhdt_config();
            let mut buffers: Vec<ReplayBuffer> = Vec::new();
            for i in 0..n_tasks {
                let task_rng = run_rng.child_indexed("task", i as u64);
                let base_step = i * cfg.steps_per_task;
                let mut eval_err = None;
                let outcome = train_task_mhdt(
                    &mut mh,
                    i,
                    &datasets[i],
                    &buffers,
                    &mhcfg,
                    &adam_cfg,
                    &opts,
                    &task_rng,
                    |step, mh| {
                        if (step + 1) % cfg.eval_interval == 0 && eval_err.is_none() {
                            for j in 0..n_tasks {
                                let head = j.min(mh.head_count() - 1);
                                match eval_return(
                                    &mh.store,
                                    &mh.view(head),
                                    &dt_cfg,
                                    &tasks[j],
                                    g_star[j],
                                    cfg.eval_episodes,
                                    &eval_rngs[j],
                                ) {
                                    Ok(ret) => curve.push(CurveRow {
                                        step: base_step + step + 1,
                                        task: j,
                                        ret,
                                    }),
                                    Err(e) => eval_err = Some(e),
                                }
                            }
                        }
                    },
                )?;
                if let Some(e) = eval_err {
                    return Err(e);
                }
                // The teacher's final return on its task feeds the
                // distillation-gap metric.
                teacher_returns.push(eval_return(
                    &outcome.teacher.store,
                    &outcome.teacher.view,
                    &dt_cfg,
                    &tasks[i],
                    g_star[i],
                    cfg.eval_episodes,
                    &eval_rngs[i],
                )?);
                write_buffer(&run_dir, i, &datasets[i], &outcome.buffer)?;
                buffers.push(outcome.buffer);
                for j in 0..n_tasks {
                    let head = j.min(mh.head_count() - 1);
                    matrix.returns[i][j] = eval_return(
                        &mh.store,
                        &mh.view(head),
                        &dt_cfg,
                        &tasks[j],
                        g_star[j],
                        cfg.eval_episodes,
                        &eval_rngs[j],
                    )?;
                }
            }
            matrix.teacher_returns = Some(teacher_returns.clone());
            save_checkpoint(&run_dir.join("model.cdt"), &mh.store)?;
        }
        Method::Loradt => {
            let mut init_rng = run_rng.child("model-init");
            let mut learner = LoraDt::new(dt_cfg.clone(), cfg.lora_config(), &mut init_rng)?;
            for i in 0..n_tasks {
                let task_rng = run_rng.child_indexed("task", i as u64);
                let base_step = i * cfg.steps_per_task;
                let mut eval_err: Option<HarnessError> = None;
                learner.train_task(i, &datasets[i], &adam_cfg, &opts, &task_rng, |step, me| {
                    if (step + 1) % cfg.eval_interval == 0 && eval_err.is_none() {
                        for j in 0..n_tasks {
                            let result = me.eval_with_task(j, |model| {
                                eval_return(
                                    &model.store,
                                    &model.view,
                                    &dt_cfg,
                                    &tasks[j],
                                    g_star[j],
                                    cfg.eval_episodes,
                                    &eval_rngs[j],
                                )
                            });
                            match result.map_err(HarnessError::from).and_then(|r| r) {
                                Ok(ret) => curve.push(CurveRow {
                                    step: base_step + step + 1,
                                    task: j,
                                    ret,
                                }),
                                Err(e) => eval_err = Some(e),
                            }
                        }
                    }
                })?;
                if let Some(e) = eval_err {
                    return Err(e);
                }
                write_adapters(&run_dir, i, &learner, cfg)?;
                for j in 0..n_tasks {
                    let ret = learner
                        .eval_with_task(j, |model| {
                            eval_return(
                                &model.store,
                                &model.view,
                                &dt_cfg,
                                &tasks[j],
                                g_star[j],
                                cfg.eval_episodes,
                                &eval_rngs[j],
                            )
                        })
                        .map_err(HarnessError::from)
                        .and_then(|r| r)?;
                    matrix.returns[i][j] = ret;
                }
            }
            save_checkpoint(&run_dir.join("model.cdt"), &learner.model.store)?;
        }
    }

    // Metrics; DG only when teachers exist.
    let per_v = per(&matrix)?;
    let bwt_v = if n_tasks >= 2 { Some(bwt(&matrix)?) } else { None };
    let fwt_v = if n_tasks >= 2 { Some(fwt(&matrix)?) } else { None };
    let dg_v = matrix.teacher_returns.as_ref().map(|_| dg(&matrix)).transpose()?;

    let metrics_json = metrics_record(method, seed, per_v, bwt_v, fwt_v, dg_v);
    write_text(&run_dir.join("metrics.json"), &metrics_json)?;
    write_text(&run_dir.join("curve.csv"), &curve_csv(&curve))?;
    write_text(&run_dir.join("matrix.csv"), &matrix_csv(&matrix))?;
    write_text(&run_dir.join("memory.json"), &memory_record(cfg, method))?;
    write_text(
        &run_dir.join("config.txt"),
        &format!(
            "{}\nmethod={} seed={}\n",
            cfg.compatibility_key(),
            method.name(),
            seed
        ),
    )?;
    Ok(RunSummary {
        matrix,
        metrics_json,
        run_dir,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

fn metrics_record(
    method: Method,
    seed: u64,
    per_v: f64,
    bwt_v: Option<f64>,
    fwt_v: Option<f64>,
    dg_v: Option<f64>,
) -> String {
    let opt = |v: Option<f64>| v.map_or("null".to_string(), |x| format!("{x}"));
    format!(
        "{{\"method\":\"{}\",\"seed\":{},\"PER\":{},\"BWT\":{},\"FWT\":{},\"DG\":{}}}\n",
        method.name(),
        seed,
        per_v,
        opt(bwt_v),
        opt(fwt_v),
        opt(dg_v)
    )
}

fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("step,task,return\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.step, r.task, r.ret);
    }
    out
}

fn matrix_csv(m: &PerformanceMatrix) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..m.n_tasks).map(|j| format!("task{j}")).collect();
    let _ = writeln!(out, "row,{}", header.join(","));
    let _ = writeln!(
        out,
        "random_init,{}",
        m.random_baseline
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    for (i, row) in m.returns.iter().enumerate() {
        let _ = writeln!(
            out,
            "after_task{},{}",
            i,
            row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        );
    }
    if let Some(t) = &m.teacher_returns {
        let _ = writeln!(
            out,
            "teacher,{}",
            t.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        );
    }
    out
}

/// Memory accounting: replay buffers store (s, a, s', r, done) per
/// transition; adapters store 2*k*r*(h+d) floats per task. Both in bytes.
fn memory_record(cfg: &RunConfig, method: Method) -> String {
    let sdim = crate::tasks::STATE_DIM;
    let adim = crate::tasks::ACTION_DIM;
    let buffer_bytes = match method {
        Method::Mhdt => cfg.buffer_capacity * (2 * sdim + adim + 2) * 4,
        _ => 0,
    };
    let adapter_bytes = match method {
        Method::Loradt => memory_footprint(&cfg.dt_config(), &cfg.lora_config()) * 4,
        _ => 0,
    };
    format!(
        "{{\"method\":\"{}\",\"buffer_bytes_per_task\":{},\"adapter_bytes_per_task\":{}}}\n",
        method.name(),
        buffer_bytes,
        adapter_bytes
    )
}

fn write_buffer(
    run_dir: &Path,
    task_index: usize,
    dataset: &OfflineDataset,
    buffer: &ReplayBuffer,
) -> Result<(), HarnessError> {
    let as_dataset = OfflineDataset {
        task: dataset.task.clone(),
        quality: dataset.quality,
        trajectories: buffer.trajectories.clone(),
        seed: dataset.seed,
    };
    write_dataset(
        &run_dir.join(format!("buffer_task{task_index}.jsonl")),
        &as_dataset,
    )
}

/// Adapter file: the named-tensor container with task index, layer count,
/// rank, dims, and the base fingerprint recorded alongside the factors.
fn write_adapters(
    run_dir: &Path,
    task_index: usize,
    learner: &LoraDt,
    cfg: &RunConfig,
) -> Result<(), HarnessError> {
    let set = learner
        .adapters
        .sets
        .get(&task_index)
        .ok_or_else(|| HarnessError::Config(format!("no adapters for task {task_index}")))?;
    let fp = learner.adapters.base_fingerprint;
    let mut entries = vec![
        CheckpointEntry {
            name: "meta.task_index".into(),
            shape: vec![1],
            data: vec![task_index as f32],
        },
        CheckpointEntry {
            name: "meta.n_layers".into(),
            shape: vec![1],
            data: vec![cfg.n_layers as f32],
        },
        CheckpointEntry {
            name: "meta.rank".into(),
            shape: vec![1],
            data: vec![cfg.lora_rank as f32],
        },
        CheckpointEntry {
            name: "meta.embed_dim".into(),
            shape: vec![1],
            data: vec![cfg.embed_dim as f32],
        },
        CheckpointEntry {
            name: "meta.mlp_inner_dim".into(),
            shape: vec![1],
            data: vec![cfg.mlp_inner_dim as f32],
        },
        CheckpointEntry {
            name: "meta.fingerprint".into(),
            shape: vec![2],
            data: vec![
                f32::from_bits((fp >> 32) as u32),
                f32::from_bits(fp as u32),
            ],
        },
    ];
    for (i, (a0, b0, a1, b1)) in set.blocks.iter().enumerate() {
        for (suffix, t) in [("a0", a0), ("b0", b0), ("a1", a1), ("b1", b1)] {
            entries.push(CheckpointEntry {
                name: format!("block{i}.{suffix}"),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
    }
    let path = run_dir.join(format!("adapters_task{task_index}.cdt"));
    std::fs::write(&path, encode(&entries))
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

struct RunRecord {
    method: String,
    per: f64,
    bwt: Option<f64>,
    fwt: Option<f64>,
    dg: Option<f64>,
    buffer_bytes: u64,
    adapter_bytes: u64,
    compat: String,
}

fn json_field(text: &str, key: &str) -> Option<String> {
    let probe = format!("\"{key}\":");
    let start = text.find(&probe)? + probe.len();
    let rest = &text[start..];
    let end = rest
        .find([',', '}'])
        .unwrap_or(rest.len());
    Some(rest[..end].trim().trim_matches('"').to_string())
}

fn read_run_dir(dir: &Path) -> Result<RunRecord, HarnessError> {
    let metrics = std::fs::read_to_string(dir.join("metrics.json"))
        .map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    let memory = std::fs::read_to_string(dir.join("memory.json"))
        .map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    let config = std::fs::read_to_string(dir.join("config.txt"))
        .map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    let parse_opt = |key: &str, text: &str| -> Option<f64> {
        let raw = json_field(text, key)?;
        if raw == "null" {
            None
        } else {
            raw.parse().ok()
        }
    };
    let method = json_field(&metrics, "method")
        .ok_or_else(|| HarnessError::Io(format!("{}: malformed metrics.json", dir.display())))?;
    let per = parse_opt("PER", &metrics)
        .ok_or_else(|| HarnessError::Io(format!("{}: missing PER", dir.display())))?;
    Ok(RunRecord {
        method,
        per,
        bwt: parse_opt("BWT", &metrics),
        fwt: parse_opt("FWT", &metrics),
        dg: parse_opt("DG", &metrics),
        buffer_bytes: parse_opt("buffer_bytes_per_task", &memory).unwrap_or(0.0) as u64,
        adapter_bytes: parse_opt("adapter_bytes_per_task", &memory).unwrap_or(0.0) as u64,
        compat: config.lines().next().unwrap_or("").to_string(),
    })
}

/// Aggregates per-seed medians over completed run directories and renders
/// the method-by-metric comparison plus the memory table. Returns
/// (csv, text); both are also written next to the first run directory.
pub fn cmd_report(dirs: &[PathBuf]) -> Result<(String, String), HarnessError> {
    if dirs.is_empty() {
        return Err(HarnessError::Config("report needs at least one run dir".into()));
    }
    let records: Vec<RunRecord> = dirs
        .iter()
        .map(|d| read_run_dir(d))
        .collect::<Result<_, _>>()?;
    let first_compat = &records[0].compat;
    for (dir, r) in dirs.iter().zip(&records) {
        if &r.compat != first_compat {
            return Err(HarnessError::Config(format!(
                "incompatible runs:\n  {}\n    {}\n  {}\n    {}",
                dirs[0].display(),
                first_compat,
                dir.display(),
                r.compat
            )));
        }
    }

    let mut methods: Vec<String> = records.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();

    let mut csv = String::from("method,seeds,PER,BWT,FWT,DG,buffer_bytes_per_task,adapter_bytes_per_task\n");
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:<10} {:>5} {:>12} {:>12} {:>12} {:>12} {:>14} {:>15}",
        "method", "seeds", "PER", "BWT", "FWT", "DG", "buffer B/task", "adapter B/task"
    );
    for m in &methods {
        let group: Vec<&RunRecord> = records.iter().filter(|r| &r.method == m).collect();
        let seeds = group.len();
        let med = |f: &dyn Fn(&RunRecord) -> Option<f64>| -> Option<f64> {
            let mut vs: Vec<f64> = group.iter().filter_map(|r| f(r)).collect();
            if vs.len() == seeds && seeds > 0 {
                Some(median(&mut vs))
            } else {
                None
            }
        };
        let per_m = med(&|r: &RunRecord| Some(r.per));
        let bwt_m = med(&|r: &RunRecord| r.bwt);
        let fwt_m = med(&|r: &RunRecord| r.fwt);
        let dg_m = med(&|r: &RunRecord| r.dg);
        let buffer = group[0].buffer_bytes;
        let adapter = group[0].adapter_bytes;
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        let _ = writeln!(
            csv,
            "{m},{seeds},{},{},{},{},{buffer},{adapter}",
            per_m.map_or("".into(), |v| v.to_string()),
            bwt_m.map_or("".into(), |v| v.to_string()),
            fwt_m.map_or("".into(), |v| v.to_string()),
            dg_m.map_or("".into(), |v| v.to_string()),
        );
        let _ = writeln!(
            text,
            "{:<10} {:>5} {:>12} {:>12} {:>12} {:>12} {:>14} {:>15}",
            m,
            seeds,
            show(per_m),
            show(bwt_m),
            show(fwt_m),
            show(dg_m),
            buffer,
            adapter
        );
    }

    let out_base = dirs[0].parent().unwrap_or(Path::new("."));
    write_text(&out_base.join("report.csv"), &csv)?;
    write_text(&out_base.join("report.txt"), &text)?;
    Ok((csv, text))
}

#[cfg(test)]
mod tests;
