//! Flat key-value run configuration with typed validation.
//!
//! The file format is one `key = value` pair per line; `#` starts a
//! comment. No nesting, no quoting. Unknown keys are rejected before any
//! compute happens.

use super::HarnessError;
use crate::dt::{DtConfig, TrainOptions};
use crate::lora::LoraConfig;
use crate::mhdt::MhdtConfig;
use crate::numerics::AdamConfig;
use crate::tasks::{Quality, TaskFamily, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Mhdt,
    Loradt,
    Vanilla,
    Ewc,
    Si,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s {
            "mhdt" => Ok(Method::Mhdt),
            "loradt" => Ok(Method::Loradt),
            "vanilla" => Ok(Method::Vanilla),
            "ewc" => Ok(Method::Ewc),
            "si" => Ok(Method::Si),
            other => Err(HarnessError::Config(format!(
                "unknown method `{other}` (expected mhdt|loradt|vanilla|ewc|si)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Mhdt => "mhdt",
            Method::Loradt => "loradt",
            Method::Vanilla => "vanilla",
            Method::Ewc => "ewc",
            Method::Si => "si",
        }
    }
}

/// Everything one experiment needs; field defaults mirror the common and
/// method-specific hyperparameter tables, with a desk-scale step budget.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Option<Method>,
    pub family: TaskFamily,
    pub n_tasks: usize,
    pub quality: Quality,
    pub steps_per_task: usize,
    pub seeds: Vec<u64>,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub n_traj: usize,
    pub horizon: usize,
    pub dataset_seed: u64,

    pub batch_size: usize,
    pub loss_last_only: bool,
    pub context_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub mlp_inner_dim: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,

    pub k_select: usize,
    pub select_period: usize,
    pub lambda_distill: f32,
    pub lambda_rehearsal: f32,
    pub buffer_capacity: usize,

    pub lora_rank: usize,
    pub merge_weight: f32,
    pub teacher_fraction: f32,

    pub ewc_lambda: f32,
    pub ewc_fisher_batches: usize,
    pub si_coefficient: f32,
    pub si_damping: f32,

    pub data_dir: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: None,
            family: TaskFamily::Direction,
            n_tasks: 4,
            quality: Quality::Expert,
            steps_per_task: 2000,
            seeds: vec![0, 1, 2],
            eval_interval: 200,
            eval_episodes: 10,
            n_traj: 200,
            horizon: 50,
            dataset_seed: 7_654_321,
            batch_size: 64,
            loss_last_only: false,
            context_len: 20,
            n_layers: 3,
            n_heads: 1,
            embed_dim: 128,
            mlp_inner_dim: 128,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            k_select: 2,
            select_period: 10,
            lambda_distill: 0.5,
            lambda_rehearsal: 1.0,
            buffer_capacity: 1000,
            lora_rank: 4,
            merge_weight: 0.2,
            teacher_fraction: 0.5,
            ewc_lambda: 100.0,
            ewc_fisher_batches: 50,
            si_coefficient: 1.0,
            si_damping: 1e-3,
            data_dir: "data".into(),
            out_dir: "runs".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value.parse().map_err(|_| {
        HarnessError::Config(format!("key `{key}`: cannot parse `{value}`"))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(HarnessError::Config(format!(
            "key `{key}`: expected true/false, got `{value}`"
        ))),
    }
}

impl RunConfig {
    /// Parses the flat key-value text; later lines override earlier ones.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HarnessError::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            match key {
                "method" => cfg.method = Some(Method::parse(value)?),
                "family" => {
                    cfg.family = match value {
                        "direction" => TaskFamily::Direction,
                        "velocity" => TaskFamily::Velocity,
                        _ => {
                            return Err(HarnessError::Config(format!(
                                "key `family`: unknown family `{value}`"
                            )))
                        }
                    }
                }
                "quality" => {
                    cfg.quality = match value {
                        "expert" => Quality::Expert,
                        "middle" => Quality::Middle,
                        _ => {
                            return Err(HarnessError::Config(format!(
                                "key `quality`: unknown quality `{value}`"
                            )))
                        }
                    }
                }
                "n_tasks" => cfg.n_tasks = parse_num(key, value)?,
                "steps_per_task" => cfg.steps_per_task = parse_num(key, value)?,
                "seeds" => {
                    cfg.seeds = value
                        .split(',')
                        .map(|s| parse_num::<u64>(key, s.trim()))
                        .collect::<Result<_, _>>()?;
                }
                "eval_interval" => cfg.eval_interval = parse_num(key, value)?,
                "eval_episodes" => cfg.eval_episodes = parse_num(key, value)?,
                "n_traj" => cfg.n_traj = parse_num(key, value)?,
                "horizon" => cfg.horizon = parse_num(key, value)?,
                "dataset_seed" => cfg.dataset_seed = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "loss_last_only" => cfg.loss_last_only = parse_bool(key, value)?,
                "context_len" => cfg.context_len = parse_num(key, value)?,
                "n_layers" => cfg.n_layers = parse_num(key, value)?,
                "n_heads" => cfg.n_heads = parse_num(key, value)?,
                "embed_dim" => cfg.embed_dim = parse_num(key, value)?,
                "mlp_inner_dim" => cfg.mlp_inner_dim = parse_num(key, value)?,
                "learning_rate" => cfg.learning_rate = parse_num(key, value)?,
                "weight_decay" => cfg.weight_decay = parse_num(key, value)?,
                "k_select" => cfg.k_select = parse_num(key, value)?,
                "select_period" => cfg.select_period = parse_num(key, value)?,
                "lambda_distill" => cfg.lambda_distill = parse_num(key, value)?,
                "lambda_rehearsal" => cfg.lambda_rehearsal = parse_num(key, value)?,
                "buffer_capacity" => cfg.buffer_capacity = parse_num(key, value)?,
                "lora_rank" => cfg.lora_rank = parse_num(key, value)?,
                "merge_weight" => cfg.merge_weight = parse_num(key, value)?,
                "teacher_fraction" => cfg.teacher_fraction = parse_num(key, value)?,
                "ewc_lambda" => cfg.ewc_lambda = parse_num(key, value)?,
                "ewc_fisher_batches" => cfg.ewc_fisher_batches = parse_num(key, value)?,
                "si_coefficient" => cfg.si_coefficient = parse_num(key, value)?,
                "si_damping" => cfg.si_damping = parse_num(key, value)?,
                "data_dir" => cfg.data_dir = value.to_string(),
                "out_dir" => cfg.out_dir = value.to_string(),
                unknown => {
                    return Err(HarnessError::Config(format!(
                        "line {}: unknown key `{unknown}`",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_tasks < 1 {
            return Err(HarnessError::Config("n_tasks must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must be nonempty".into()));
        }
        if self.steps_per_task < 1 || self.eval_interval < 1 {
            return Err(HarnessError::Config(
                "steps_per_task and eval_interval must be >= 1".into(),
            ));
        }
        if self.n_traj < 1 || self.horizon < 1 {
            return Err(HarnessError::Config("n_traj and horizon must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(HarnessError::Config("batch_size must be >= 1".into()));
        }
        if self.buffer_capacity < self.horizon {
            return Err(HarnessError::Config(
                "buffer_capacity must hold at least one trajectory".into(),
            ));
        }
        self.dt_config().validate().map_err(HarnessError::from)?;
        self.lora_config()
            .validate(&self.dt_config())
            .map_err(HarnessError::from)?;
        Ok(())
    }

    pub fn tasks(&self) -> Vec<TaskSpec> {
        let mut tasks = match self.family {
            TaskFamily::Direction => TaskSpec::direction_sequence(self.n_tasks),
            TaskFamily::Velocity => TaskSpec::velocity_sequence(self.n_tasks),
        };
        for t in &mut tasks {
            t.horizon = self.horizon;
        }
        tasks
    }

    pub fn dt_config(&self) -> DtConfig {
        DtConfig {
            context_len: self.context_len,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            embed_dim: self.embed_dim,
            mlp_inner_dim: self.mlp_inner_dim,
            state_dim: crate::tasks::STATE_DIM,
            action_dim: crate::tasks::ACTION_DIM,
            max_timestep: self.horizon,
            action_bound: 1.0,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            loss_last_only: self.loss_last_only,
        }
    }

    pub fn mhdt_config(&self) -> MhdtConfig {
        MhdtConfig {
            k_select: self.k_select,
            select_period: self.select_period,
            lambda_distill: self.lambda_distill,
            lambda_rehearsal: self.lambda_rehearsal,
            steps_per_task: self.steps_per_task,
            buffer_capacity: self.buffer_capacity,
        }
    }

    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora_rank,
            merge_weight: self.merge_weight,
            steps_per_task: self.steps_per_task,
            teacher_fraction: self.teacher_fraction,
        }
    }

    /// Canonical text of every experiment-defining field (method and output
    /// paths excluded); used to refuse mixing incompatible runs in reports.
    pub fn compatibility_key(&self) -> String {
        format!(
            "family={} n_tasks={} quality={} steps_per_task={} eval_interval={} \
             eval_episodes={} n_traj={} horizon={} dataset_seed={} batch_size={} \
             loss_last_only={} context_len={} n_layers={} n_heads={} embed_dim={} \
             mlp_inner_dim={} learning_rate={} weight_decay={}",
            self.family.name(),
            self.n_tasks,
            self.quality.name(),
            self.steps_per_task,
            self.eval_interval,
            self.eval_episodes,
            self.n_traj,
            self.horizon,
            self.dataset_seed,
            self.batch_size,
            self.loss_last_only,
            self.context_len,
            self.n_layers,
            self.n_heads,
            self.embed_dim,
            self.mlp_inner_dim,
            self.learning_rate,
            self.weight_decay,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_defaults_and_overrides() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.context_len, 20);
        assert_eq!(cfg.n_layers, 3);
        assert_eq!(cfg.embed_dim, 128);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.k_select, 2);
        assert_eq!(cfg.select_period, 10);
        assert_eq!(cfg.lambda_distill, 0.5);
        assert_eq!(cfg.lambda_rehearsal, 1.0);
        assert_eq!(cfg.lora_rank, 4);
        assert_eq!(cfg.merge_weight, 0.2);
        assert_eq!(cfg.buffer_capacity, 1000);
        assert_eq!(cfg.eval_episodes, 10);

        let cfg = RunConfig::parse(
            "method = mhdt\nn_tasks = 6\nseeds = 3, 4\nembed_dim = 32\n# comment\nquality = middle\n",
        )
        .unwrap();
        assert_eq!(cfg.method, Some(Method::Mhdt));
        assert_eq!(cfg.n_tasks, 6);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.embed_dim, 32);
        assert_eq!(cfg.quality, Quality::Middle);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("not_a_key = 1\n").unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn malformed_lines_and_values_are_rejected() {
        assert!(RunConfig::parse("just words\n").is_err());
        assert!(RunConfig::parse("n_tasks = many\n").is_err());
        assert!(RunConfig::parse("loss_last_only = maybe\n").is_err());
        assert!(RunConfig::parse("method = sgd\n").is_err());
        assert!(RunConfig::parse("seeds = \n").is_err());
    }

    #[test]
    fn structural_validation_runs_at_parse_time() {
        // embed_dim not divisible by heads.
        assert!(RunConfig::parse("embed_dim = 30\nn_heads = 4\n").is_err());
        // buffer below one trajectory.
        assert!(RunConfig::parse("buffer_capacity = 10\n").is_err());
        // lora rank above min(d, h).
        assert!(RunConfig::parse("lora_rank = 300\n").is_err());
    }
}
