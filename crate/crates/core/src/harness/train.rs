use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DataKind, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{che_accuracy, last_k_perplexity, Protocol, ReportMeta};
use crate::model::{save_checkpoint, Model, Phase, Session};
use crate::tasks::{lm_example, read_bytes, sample_training_length, TaskId, TextWindows};
use crate::tensor::{adam_step, clip_grad_norm, AdamState, Var};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// RNG streams derived from the run seed.
const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const MODEL_STREAM: u64 = 2;

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub model: Model,
    pub losses: Vec<f64>,
}

pub(crate) enum Source {
    Task(TaskId),
    Corpus(Vec<u8>),
}

impl Source {
    pub(crate) fn open(cfg: &RunConfig) -> Result<Self> {
        Ok(match cfg.data_kind()? {
            DataKind::Task(t) => Source::Task(t),
            DataKind::Corpus(p) => {
                let bytes = read_bytes(&p)?;
                if bytes.len() < cfg.train.train_len {
                    return Err(Error::TooShort {
                        needed: cfg.train.train_len,
                        have: bytes.len(),
                    });
                }
                Source::Corpus(bytes)
            }
        })
    }
}

/// A training batch: LM windows or same-length task instances.
struct Batch {
    tokens: Vec<usize>,
    targets: Vec<usize>,
    rows: usize,
    answer_len: Option<usize>,
}

fn sample_batch<R: Rng>(src: &Source, cfg: &RunConfig, rng: &mut R) -> Result<Batch> {
    let (b, n) = (cfg.train.batch, cfg.train.train_len);
    let mut batch = Batch {
        tokens: Vec::new(),
        targets: Vec::new(),
        rows: b,
        answer_len: None,
    };
    match src {
        Source::Task(task) => {
            let len = task.fit_length(sample_training_length(n, rng));
            for _ in 0..b {
                let inst = task.generate(len, rng)?;
                batch.tokens.extend(inst.input);
                batch.targets.extend(inst.target);
            }
            batch.answer_len = Some(task.answer_len(len));
        }
        Source::Corpus(bytes) => {
            for _ in 0..b {
                let start = rng.gen_range(0..=bytes.len() - n);
                let (x, y) = lm_example(&bytes[start..start + n]);
                batch.tokens.extend(x);
                batch.targets.extend(y);
            }
        }
    }
    Ok(batch)
}

fn batch_loss<R: Rng>(model: &Model, s: &mut Session, batch: &Batch, rng: &mut R) -> Result<Var> {
    let logits = match batch.answer_len {
        Some(a) => model.placeholder_logits(s, &batch.tokens, batch.rows, a, Phase::Train, rng)?,
        None => model.logits(s, &batch.tokens, batch.rows, Phase::Train, rng)?,
    };
    s.tape.cross_entropy(logits, &batch.targets, &vec![true; batch.targets.len()])
}

/// Quick in-distribution metric for snapshots: accuracy at the largest
/// training length, or last-k perplexity over training-length windows.
fn snapshot(model: &Model, src: &Source, cfg: &RunConfig, step: usize) -> Result<f64> {
    let meta = ReportMeta {
        pe: model.config.pe.label(),
        config_hash: cfg.config_hash(),
        protocol: Protocol::Accuracy,
    };
    match src {
        Source::Task(task) => {
            let len = task.fit_length(cfg.train.train_len);
            let mut rng = seeded(cfg.train.seed ^ step as u64, DATA_STREAM);
            let r = che_accuracy(model, *task, &[len], cfg.eval.samples, cfg.eval.batch, &mut rng, meta)?;
            Ok(r.rows[0].mean)
        }
        Source::Corpus(bytes) => {
            let n = cfg.train.train_len;
            let mut w = TextWindows::from_bytes(bytes, n, cfg.last_k().min(n))?;
            w.windows.truncate(cfg.eval.max_windows);
            Ok(last_k_perplexity(model, &w, cfg.eval.batch)?.perplexity)
        }
    }
}

fn write_line(out: &mut impl Write, line: &MetricsLine, path: &Path) -> Result<()> {
    let json = serde_json::to_string(line)?;
    writeln!(out, "{json}").map_err(|e| Error::io(path, e))
}

/// Trains from scratch into `dir`, writing the resolved config, a metrics
/// log and the final checkpoint (plus periodic ones when configured).
pub fn train(cfg: &RunConfig, dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;

    let src = Source::open(cfg)?;
    let mut model = Model::new(cfg.model_config(), &mut seeded(cfg.train.seed, INIT_STREAM))?;
    let mut data_rng = seeded(cfg.train.seed, DATA_STREAM);
    let mut model_rng = seeded(cfg.train.seed, MODEL_STREAM);
    let adam = cfg.optim.adam();
    let mut states: Vec<AdamState> = model.params.iter().map(|(_, t)| AdamState::new(t.numel(), &adam)).collect();

    let metrics = dir.join(METRICS_FILE);
    let file = File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let mut log = BufWriter::new(file);
    let checkpoint = dir.join(CHECKPOINT_FILE);
    let total = cfg.train.steps;
    let mut losses = Vec::with_capacity(total);

    for step in 1..=total {
        let start = Instant::now();
        let lr = cfg.optim.lr_at(step, total);
        let batch = sample_batch(&src, cfg, &mut data_rng)?;
        let mut s = Session::new();
        let loss_var = batch_loss(&model, &mut s, &batch, &mut model_rng)?;
        let loss = s.tape.value(loss_var).item();
        s.backward(loss_var, &mut model.params)?;
        drop(s);
        for (_, p) in model.params.iter_mut() {
            if p.grad.is_none() {
                p.grad = Some(vec![0.0; p.numel()]);
            }
        }
        let mut tensors = model.params.tensors_mut();
        let grad_norm = clip_grad_norm(&mut tensors, cfg.optim.clip);
        if !loss.is_finite() || !grad_norm.is_finite() {
            let dump = dir.join("nonfinite.json");
            let diag = serde_json::json!({ "step": step, "loss": loss, "lr": lr, "grad_norm": grad_norm });
            std::fs::write(&dump, diag.to_string()).map_err(|e| Error::io(&dump, e))?;
            return Err(Error::NonFinite { step, lr, grad_norm });
        }
        states.iter_mut().for_each(|st| st.lr = lr);
        adam_step(&mut tensors, &mut states)?;
        losses.push(loss);

        let eval = if cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0 {
            Some(snapshot(&model, &src, cfg, step)?)
        } else {
            None
        };
        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 && step < total {
            save_checkpoint(&model, &checkpoint)?;
        }
        let line = MetricsLine {
            step,
            loss,
            lr,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            eval,
        };
        write_line(&mut log, &line, &metrics)?;
    }
    log.flush().map_err(|e| Error::io(&metrics, e))?;
    save_checkpoint(&model, &checkpoint)?;
    Ok(TrainOutcome {
        dir: dir.to_path_buf(),
        checkpoint,
        metrics,
        model,
        losses,
    })
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
