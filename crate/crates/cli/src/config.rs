//! Run configuration: defaults, a flat `key = value` file, and flag overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ign::classification::NewtonConfig;
use ign::datasets::{load_delimited, split, Dataset, Generator, TaskKind};
use ign::kernels::KernelKind;
use ign::model::{ModelConfig, Trainable};
use ign::trainer::{LossScaling, TrainConfig};
use ign::{IgnError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskKind,
    /// Generator name; ignored when `data` is set.
    pub generator: String,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub noise: f64,
    pub data: Option<PathBuf>,
    pub target: String,
    pub delimiter: char,
    pub train_fraction: f64,

    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub m: usize,
    pub kernel: KernelKind,
    pub gamma: f64,
    pub train_gamma: bool,
    pub head_bias: bool,
    pub init_sigma_eps: f64,
    pub init_z_from_data: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss_scaling: LossScaling,
    pub freeze: Vec<String>,
    pub newton_max_iter: usize,
    pub newton_tol: f64,

    pub seed: u64,
    pub checkpoint_every: usize,
    pub jobs: usize,
    pub m_grid: Vec<usize>,
    pub repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(1);
        let train = TrainConfig::default();
        RunConfig {
            task: TaskKind::Regression,
            generator: "levy".into(),
            n: 2000,
            dim: 4,
            classes: 2,
            separation: 6.0,
            noise: ign::datasets::DEFAULT_NOISE_STD,
            data: None,
            target: "y".into(),
            delimiter: ',',
            train_fraction: 0.6,
            hidden: model.hidden,
            feature_dim: model.feature_dim,
            m: model.num_inducing,
            kernel: model.kernel,
            gamma: model.gamma,
            train_gamma: model.train_gamma,
            head_bias: model.head_bias,
            init_sigma_eps: model.init_sigma_eps,
            init_z_from_data: false,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.learning_rate,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            loss_scaling: train.loss_scaling,
            freeze: Vec::new(),
            newton_max_iter: train.newton.max_iter,
            newton_tol: train.newton.tol,
            seed: 0,
            checkpoint_every: 50,
            jobs: 1,
            m_grid: ign::metrics::DEFAULT_M_GRID.to_vec(),
            repeats: 3,
        }
    }
}

/// Keys accepted by [`RunConfig::set`], in file order.
pub const KEYS: &[&str] = &[
    "task",
    "generator",
    "n",
    "dim",
    "classes",
    "separation",
    "noise",
    "data",
    "target",
    "delimiter",
    "train-fraction",
    "hidden",
    "feature-dim",
    "m",
    "kernel",
    "gamma",
    "train-gamma",
    "head-bias",
    "init-sigma-eps",
    "init-z-from-data",
    "epochs",
    "batch-size",
    "lr",
    "adam-beta1",
    "adam-beta2",
    "adam-eps",
    "loss-scaling",
    "freeze",
    "newton-max-iter",
    "newton-tol",
    "seed",
    "checkpoint-every",
    "jobs",
    "m-grid",
    "repeats",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| IgnError::Schema(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(IgnError::Schema(format!("invalid boolean '{value}' for {key}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

const GROUPS: [&str; 5] = ["feature-map", "inducing", "head", "noise", "kernel"];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => self.task = v.parse()?,
            "generator" => self.generator = v.to_string(),
            "n" => self.n = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "separation" => self.separation = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "target" => self.target = v.to_string(),
            "delimiter" => {
                self.delimiter = match v {
                    "tab" | "\\t" => '\t',
                    _ if v.chars().count() == 1 && v.is_ascii() => v.chars().next().unwrap(),
                    _ => return Err(IgnError::Schema(format!("delimiter must be one ASCII character, got '{v}'"))),
                }
            }
            "train-fraction" => self.train_fraction = parse(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "feature-dim" => self.feature_dim = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "kernel" => self.kernel = v.parse()?,
            "gamma" => self.gamma = parse(key, v)?,
            "train-gamma" => self.train_gamma = parse_bool(key, v)?,
            "head-bias" => self.head_bias = parse_bool(key, v)?,
            "init-sigma-eps" => self.init_sigma_eps = parse(key, v)?,
            "init-z-from-data" => self.init_z_from_data = parse_bool(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch-size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "adam-beta1" => self.adam_beta1 = parse(key, v)?,
            "adam-beta2" => self.adam_beta2 = parse(key, v)?,
            "adam-eps" => self.adam_eps = parse(key, v)?,
            "loss-scaling" => self.loss_scaling = v.parse()?,
            "freeze" => {
                let groups: Vec<String> = v
                    .split(',')
                    .map(|g| g.trim().to_string())
                    .filter(|g| !g.is_empty())
                    .collect();
                if let Some(bad) = groups.iter().find(|g| !GROUPS.contains(&g.as_str())) {
                    return Err(IgnError::Schema(format!(
                        "unknown parameter group '{bad}' (expected one of {})",
                        GROUPS.join(", ")
                    )));
                }
                self.freeze = groups;
            }
            "newton-max-iter" => self.newton_max_iter = parse(key, v)?,
            "newton-tol" => self.newton_tol = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "checkpoint-every" => self.checkpoint_every = parse(key, v)?,
            "jobs" => self.jobs = parse(key, v)?,
            "m-grid" => self.m_grid = parse_list(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            other => return Err(IgnError::Schema(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                IgnError::Schema(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "task" => match self.task {
                TaskKind::Regression => "regression".into(),
                TaskKind::Classification => "classification".into(),
            },
            "generator" => self.generator.clone(),
            "n" => self.n.to_string(),
            "dim" => self.dim.to_string(),
            "classes" => self.classes.to_string(),
            "separation" => self.separation.to_string(),
            "noise" => self.noise.to_string(),
            "data" => self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "target" => self.target.clone(),
            "delimiter" => match self.delimiter {
                '\t' => "tab".into(),
                c => c.to_string(),
            },
            "train-fraction" => self.train_fraction.to_string(),
            "hidden" => join(&self.hidden),
            "feature-dim" => self.feature_dim.to_string(),
            "m" => self.m.to_string(),
            "kernel" => match self.kernel {
                KernelKind::Rbf => "rbf".into(),
                KernelKind::DotProduct => "dot-product".into(),
            },
            "gamma" => self.gamma.to_string(),
            "train-gamma" => self.train_gamma.to_string(),
            "head-bias" => self.head_bias.to_string(),
            "init-sigma-eps" => self.init_sigma_eps.to_string(),
            "init-z-from-data" => self.init_z_from_data.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch-size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "adam-beta1" => self.adam_beta1.to_string(),
            "adam-beta2" => self.adam_beta2.to_string(),
            "adam-eps" => self.adam_eps.to_string(),
            "loss-scaling" => match self.loss_scaling {
                LossScaling::PerBatch => "per-batch".into(),
                LossScaling::NOverB => "n-over-b".into(),
            },
            "freeze" => self.freeze.join(","),
            "newton-max-iter" => self.newton_max_iter.to_string(),
            "newton-tol" => self.newton_tol.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint-every" => self.checkpoint_every.to_string(),
            "jobs" => self.jobs.to_string(),
            "m-grid" => join(&self.m_grid),
            "repeats" => self.repeats.to_string(),
            _ => String::new(),
        }
    }

    /// The config as a flat file that [`apply_file`](Self::apply_file) reads back.
    pub fn to_flat(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            num_inducing: self.m,
            kernel: self.kernel,
            gamma: self.gamma,
            train_gamma: self.train_gamma,
            head_bias: self.head_bias,
            init_sigma_eps: self.init_sigma_eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let frozen = |g: &str| self.freeze.iter().any(|f| f == g);
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
            loss_scaling: self.loss_scaling,
            trainable: Trainable {
                feature_map: !frozen("feature-map"),
                inducing: !frozen("inducing"),
                head: !frozen("head"),
                noise: !frozen("noise"),
                kernel: !frozen("kernel"),
            },
            newton: NewtonConfig {
                max_iter: self.newton_max_iter,
                tol: self.newton_tol,
            },
        }
    }

    pub fn generator(&self) -> Result<Generator> {
        let n = self.n;
        Ok(match self.generator.as_str() {
            "levy" => Generator::Levy { n, dim: self.dim },
            "griewank" => Generator::Griewank { n, dim: self.dim },
            "borehole" => Generator::Borehole { n },
            "sin" | "sin-wave" => Generator::SinWave { n },
            "blobs" => Generator::Blobs {
                n,
                classes: self.classes,
                separation: self.separation,
            },
            other => return Err(IgnError::Schema(format!("unknown generator '{other}'"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(1).validate().map_err(|e| IgnError::Schema(e.to_string()))?;
        self.train_config().validate().map_err(|e| IgnError::Schema(e.to_string()))?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(IgnError::Schema("train-fraction must lie in (0, 1)".into()));
        }
        if self.jobs == 0 {
            return Err(IgnError::Schema("jobs must be at least 1".into()));
        }
        if self.data.is_none() {
            self.generator()?;
        }
        Ok(())
    }

    /// Loads or generates the full dataset with the task applied.
    pub fn dataset(&self) -> Result<Dataset> {
        let mut ds = match &self.data {
            Some(path) => {
                if !path.exists() {
                    return Err(IgnError::Schema(format!("data file {} not found", path.display())));
                }
                let (ds, summary) = load_delimited(path, &self.target, self.delimiter as u8)?;
                if summary.dropped > 0 {
                    log::warn!("dropped {} malformed row(s)", summary.dropped);
                }
                ds
            }
            None => self.generator()?.load_or_generate(self.noise, self.seed)?,
        };
        ds.task = self.task;
        Ok(ds)
    }

    /// `(train, test)` split of [`dataset`](Self::dataset).
    pub fn splits(&self) -> Result<(Dataset, Dataset)> {
        split(&self.dataset()?, self.train_fraction, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let mut c = RunConfig::default();
        c.set("hidden", "8,4").unwrap();
        c.set("freeze", "inducing,noise").unwrap();
        c.set("delimiter", "tab").unwrap();
        c.set("data", "some/file.csv").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, c.to_flat()).unwrap();
        let mut back = RunConfig::default();
        back.apply_file(&p).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let mut back = RunConfig::default();
        back.set("seed", "3").unwrap();
        for k in KEYS {
            back.set(k, &c.get(k)).unwrap();
        }
        assert_eq!(back, c);
    }

    #[test]
    fn bad_keys_and_values() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("nope", "1"), Err(IgnError::Schema(_))));
        assert!(matches!(c.set("epochs", "many"), Err(IgnError::Schema(_))));
        assert!(matches!(c.set("freeze", "brain"), Err(IgnError::Schema(_))));
        assert!(matches!(c.set("train-gamma", "maybe"), Err(IgnError::Schema(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "# comment\n\nepochs 3\n").unwrap();
        assert!(c.apply_file(&p).is_err());
    }

    #[test]
    fn freeze_maps_to_trainable() {
        let mut c = RunConfig::default();
        c.set("freeze", "feature-map, kernel").unwrap();
        let t = c.train_config().trainable;
        assert!(!t.feature_map && !t.kernel && t.inducing && t.head && t.noise);
    }
}
