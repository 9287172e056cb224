use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::model::{Mode, ModelConfig};
use crate::tasks::{TaskId, TaskSpec, BYTE_VOCAB};
use crate::tensor::AdamConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DAPE_LAB_OUT";

/// Everything a run depends on. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    /// Output root; the run directory is created beneath it.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; none when absent.
    pub clip: Option<f64>,
    /// Fraction of steps spent in linear warm-up.
    pub warmup_frac: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        OptimConfig {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            clip: Some(1.0),
            warmup_frac: 0.01,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Learning rate at 1-based `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = (self.warmup_frac * total as f64).ceil() as usize;
        if warm == 0 || step >= warm {
            self.lr
        } else {
            self.lr * step as f64 / warm as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// LM window length, or the largest input length for tasks.
    pub train_len: usize,
    pub seed: u64,
    /// Checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Evaluation snapshot every this many steps; 0 disables snapshots.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch: 8,
            train_len: 32,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

/// Either a formal-language task or a byte corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task: Option<TaskId>,
    pub corpus: Option<PathBuf>,
    /// Held-out corpus for evaluation; defaults to `corpus`.
    pub eval_corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluation lengths; empty means the default sweep for the data kind.
    pub lengths: Vec<usize>,
    /// Tokens scored per window under the last-k protocol; 0 means train_len.
    pub k: usize,
    pub protocols: Vec<Protocol>,
    /// CHE samples per length.
    pub samples: usize,
    /// Cap on windows scored per length.
    pub max_windows: usize,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lengths: Vec::new(),
            k: 0,
            protocols: vec![Protocol::LastK],
            samples: 64,
            max_windows: 8,
            batch: 8,
        }
    }
}

pub enum DataKind {
    Task(TaskId),
    Corpus(PathBuf),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Self::from_table(value)
    }

    /// Reads `path` (if any), applies `key.path=value` overrides, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn data_kind(&self) -> Result<DataKind> {
        match (&self.data.task, &self.data.corpus) {
            (Some(t), None) => Ok(DataKind::Task(*t)),
            (None, Some(p)) => Ok(DataKind::Corpus(p.clone())),
            _ => Err(Error::config("set exactly one of data.task and data.corpus")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data_kind()?;
        let t = &self.train;
        if t.steps == 0 || t.batch == 0 || t.train_len == 0 {
            return Err(Error::config("train.steps, train.batch and train.train_len must be positive"));
        }
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.warmup_frac) {
            return Err(Error::config("optim.lr must be positive and warmup_frac in [0, 1)"));
        }
        if self.eval.samples == 0 || self.eval.max_windows == 0 || self.eval.batch == 0 {
            return Err(Error::config("eval.samples, eval.max_windows and eval.batch must be positive"));
        }
        self.model_config().validate()
    }

    /// The model config with the data-dependent fields filled in: vocabulary,
    /// output size, mode and longest training sequence.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        match self.data.task {
            Some(task) => {
                m.mode = Mode::EncoderPlaceholder;
                m.vocab_size = task.model_vocab();
                m.output_size = Some(task.output_alphabet().len());
                m.max_train_len = self.task_spec(task).max_sequence_len(self.train.train_len);
            }
            None => {
                m.mode = Mode::CausalLm;
                m.vocab_size = BYTE_VOCAB;
                m.output_size = None;
                m.max_train_len = self.train.train_len;
            }
        }
        m
    }

    pub fn task_spec(&self, task: TaskId) -> TaskSpec {
        let lens = self.eval_lengths();
        TaskSpec {
            task,
            train_len_max: self.train.train_len,
            eval_len_min: lens.first().copied().unwrap_or(1),
            eval_len_max: lens.last().copied().unwrap_or(1),
        }
    }

    /// Configured lengths, else `train_len × {1,2,4,8,16}` for text and
    /// `train_len+1 ..= 2·train_len` for tasks.
    pub fn eval_lengths(&self) -> Vec<usize> {
        if !self.eval.lengths.is_empty() {
            let mut v = self.eval.lengths.clone();
            v.sort_unstable();
            v.dedup();
            return v;
        }
        let n = self.train.train_len;
        match self.data.task {
            Some(_) => (n + 1..=2 * n).collect(),
            None => crate::eval::default_sweep_lengths(n),
        }
    }

    pub fn last_k(&self) -> usize {
        if self.eval.k == 0 {
            self.train.train_len
        } else {
            self.eval.k
        }
    }

    /// SHA-256 over the canonical JSON of the config with seed and output
    /// root cleared, so seeds of one setup share a hash.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.train.seed = 0;
        c.out = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// `<root>/<hash>-s<seed>`, with root from the config, then the
    /// environment, then `runs`.
    pub fn run_dir(&self, root: Option<&Path>) -> PathBuf {
        self.out_root(root)
            .join(format!("{}-s{}", self.config_hash(), self.train.seed))
    }

    pub fn out_root(&self, root: Option<&Path>) -> PathBuf {
        root.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

/// Sets a dot-path key in `table`. The value is parsed as a TOML literal
/// and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("bad override key `{path}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
