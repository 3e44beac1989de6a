//! Flat `key=value` run configuration.
//!
//! Blank lines and everything after a `#` are ignored. Every key may appear
//! at most once per file; unknown keys are rejected. Values given on the
//! command line are applied afterwards with [`RunConfig::set`] and override
//! the file.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::condense::{sha256_hex, CondenseConfig};
use crate::error::{Error, Result};
use crate::openset::{EvalConfig, OpensetMode, Seeds, TrainConfig, DEFAULT_QUANTILE, DEFAULT_TAIL_SIZE};
use crate::seed::derive_seed;

/// Per-task split ratios (train, validation, test).
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.6, 0.2, 0.2);

const SPLIT_STREAM: u64 = 0x5b11_7000;
const TRAIN_STREAM: u64 = 0x7a11_0000;

pub const KEYS: &[&str] = &[
    "alpha",
    "alpha_rank",
    "beta_mode",
    "c",
    "data",
    "downstream_l2",
    "downstream_lr",
    "downstream_steps",
    "drop_edge_rate",
    "drop_feature_rate",
    "env_count",
    "eta",
    "eval_every",
    "fallback_scope",
    "from_task",
    "gamma",
    "k",
    "lambda",
    "lr",
    "max_iters",
    "openset",
    "out",
    "patience",
    "quantile",
    "ratio",
    "seed",
    "tail_size",
    "task",
    "threads",
    "width",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub condense: CondenseConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub task: Option<usize>,
    pub openset: OpensetMode,
    pub from_task: usize,
    pub threads: usize,
    pub downstream_lr: f64,
    pub downstream_steps: usize,
    pub downstream_l2: f64,
    pub quantile: f64,
    pub tail_size: usize,
    pub alpha_rank: Option<usize>,
    seed_set: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            condense: CondenseConfig::default(),
            data: None,
            out: None,
            task: None,
            openset: OpensetMode::Softmax,
            from_task: 1,
            threads: 1,
            downstream_lr: train.lr,
            downstream_steps: train.max_steps,
            downstream_l2: train.l2,
            quantile: DEFAULT_QUANTILE,
            tail_size: DEFAULT_TAIL_SIZE,
            alpha_rank: None,
            seed_set: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(head, _)| head).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", ln + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", ln + 1)));
            }
            seen.push(key);
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", ln + 1, strip_prefix(&e))))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let c = &mut self.condense;
        match key {
            "lambda" => c.lambda = parse(key, value)?,
            "k" => c.k = parse(key, value)?,
            "width" => c.width = parse(key, value)?,
            "alpha" => c.alpha = parse(key, value)?,
            "gamma" => c.gamma = parse(key, value)?,
            "eta" => c.eta = parse(key, value)?,
            "c" => c.c = parse(key, value)?,
            "env_count" => c.env_count = parse(key, value)?,
            "lr" => c.lr = parse(key, value)?,
            "max_iters" => c.max_iters = parse(key, value)?,
            "patience" => c.patience = parse(key, value)?,
            "eval_every" => c.eval_every = parse(key, value)?,
            "seed" => {
                c.seed = parse(key, value)?;
                self.seed_set = true;
            }
            "ratio" => c.ratio = parse(key, value)?,
            "beta_mode" => c.beta_mode = value.parse()?,
            "fallback_scope" => c.fallback_scope = value.parse()?,
            "drop_edge_rate" => c.drop_edge_rate = parse(key, value)?,
            "drop_feature_rate" => c.drop_feature_rate = parse(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "task" => self.task = Some(parse(key, value)?),
            "openset" => self.openset = value.parse()?,
            "from_task" => self.from_task = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "downstream_lr" => self.downstream_lr = parse(key, value)?,
            "downstream_steps" => self.downstream_steps = parse(key, value)?,
            "downstream_l2" => self.downstream_l2 = parse(key, value)?,
            "quantile" => self.quantile = parse(key, value)?,
            "tail_size" => self.tail_size = parse(key, value)?,
            "alpha_rank" => self.alpha_rank = Some(parse(key, value)?),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Whether `seed` was given explicitly.
    pub fn has_seed(&self) -> bool {
        self.seed_set
    }

    pub fn validate(&self) -> Result<()> {
        self.condense.validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        if self.from_task == 0 || self.task == Some(0) {
            return Err(Error::Config("task indices start at 1".into()));
        }
        if !(self.downstream_lr > 0.0) || !(self.downstream_l2 >= 0.0) {
            return Err(Error::Config(
                "downstream_lr must be positive and downstream_l2 non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.quantile) {
            return Err(Error::Config(format!(
                "quantile must lie in [0, 1), got {}",
                self.quantile
            )));
        }
        if self.tail_size < 2 {
            return Err(Error::Config("tail_size must be at least 2".into()));
        }
        if self.alpha_rank == Some(0) {
            return Err(Error::Config("alpha_rank must be positive".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        let seed = self.condense.seed;
        Seeds {
            seed,
            split_seed: derive_seed(seed, SPLIT_STREAM),
            train_seed: derive_seed(seed, TRAIN_STREAM),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.downstream_lr,
            max_steps: self.downstream_steps,
            l2: self.downstream_l2,
            seed: self.seeds().train_seed,
            ..TrainConfig::default()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            condense: self.condense.clone(),
            train: self.train_config(),
            mode: self.openset,
            quantile: self.quantile,
            tail_size: self.tail_size,
            alpha_rank: self.alpha_rank,
            from_task: self.from_task,
        }
    }

    /// Sorted `key=value` lines of every setting that affects results.
    /// Paths and the thread count are left out.
    pub fn canonical(&self) -> String {
        let mut out = self.condense.canonical();
        let mut extra = vec![
            format!(
                "alpha_rank={}",
                self.alpha_rank.map_or("auto".to_string(), |r| r.to_string())
            ),
            format!("downstream_l2={}", self.downstream_l2),
            format!("downstream_lr={}", self.downstream_lr),
            format!("downstream_steps={}", self.downstream_steps),
            format!("from_task={}", self.from_task),
            format!("openset={}", self.openset),
            format!("quantile={}", self.quantile),
            format!("tail_size={}", self.tail_size),
            format!("task={}", self.task.map_or("none".to_string(), |t| t.to_string())),
        ];
        extra.sort();
        for line in extra {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}
