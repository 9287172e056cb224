use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::RunConfig;
use super::train::{seeded, train, Source};
use crate::error::{Error, Result};
use crate::eval::{
    che_accuracy, last_k_perplexity, length_sweep, non_overlapping_perplexity, seed_aggregate, win_count,
    EvalReport, Protocol, ReportMeta,
};
use crate::model::{load_checkpoint_for, Model};
use crate::pos_enc::PeConfig;
use crate::tasks::{read_bytes, TextWindows};

/// RNG stream for evaluation samples, separate from training streams.
const EVAL_STREAM: u64 = 3;

fn meta(model: &Model, cfg: &RunConfig, protocol: Protocol) -> ReportMeta {
    ReportMeta {
        pe: model.config.pe.label(),
        config_hash: cfg.config_hash(),
        protocol,
    }
}

/// Runs every configured protocol over the configured lengths.
pub fn evaluate(cfg: &RunConfig, model: &Model) -> Result<Vec<EvalReport>> {
    let lengths = cfg.eval_lengths();
    let e = &cfg.eval;
    match Source::open(cfg)? {
        Source::Task(task) => {
            let mut rng = seeded(cfg.train.seed, EVAL_STREAM);
            let lens: Vec<usize> = lengths.into_iter().filter(|&l| task.supports_len(l)).collect();
            let m = meta(model, cfg, Protocol::Accuracy);
            Ok(vec![che_accuracy(model, task, &lens, e.samples, e.batch, &mut rng, m)?])
        }
        Source::Corpus(train_bytes) => {
            let bytes = match &cfg.data.eval_corpus {
                Some(p) => read_bytes(p)?,
                None => train_bytes,
            };
            let mut reports = Vec::new();
            for &protocol in &e.protocols {
                let m = meta(model, cfg, protocol);
                let report = match protocol {
                    Protocol::LastK => length_sweep(&lengths, m, "perplexity", |len| {
                        let mut w = TextWindows::from_bytes(&bytes, len, cfg.last_k().min(len))?;
                        w.windows.truncate(e.max_windows);
                        Ok(last_k_perplexity(model, &w, e.batch)?.perplexity)
                    })?,
                    Protocol::NonOverlapping => length_sweep(&lengths, m, "perplexity", |len| {
                        let text = &bytes[..bytes.len().min(len * e.max_windows)];
                        Ok(non_overlapping_perplexity(model, text, len, e.batch)?.perplexity)
                    })?,
                    Protocol::Accuracy => {
                        return Err(Error::config("accuracy applies to task runs, not corpora"));
                    }
                };
                reports.push(report);
            }
            Ok(reports)
        }
    }
}

/// Loads `checkpoint` against `cfg`, evaluates, and writes
/// `eval_<protocol>.{csv,jsonl}` into `out`. Returns the written paths.
pub fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let model = load_checkpoint_for(checkpoint, &cfg.model_config())?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for r in evaluate(cfg, &model)? {
        let stem = format!("eval_{}", r.meta.protocol.name());
        r.write(out, &stem)?;
        written.push(out.join(format!("{stem}.csv")));
        written.push(out.join(format!("{stem}.jsonl")));
    }
    Ok(written)
}

/// `cfg` with its positional encoding replaced by the named one. DAPE
/// settings carry over from the base config when it has any.
pub fn with_pe(cfg: &RunConfig, pe: &str, seed: u64) -> Result<RunConfig> {
    let mut c = cfg.clone();
    let dape = cfg.model.pe.dape.clone().unwrap_or_default();
    c.model.pe = PeConfig::from_name(pe, &dape)?;
    c.train.seed = seed;
    c.validate()?;
    Ok(c)
}

/// Trains and evaluates one configuration, returning the primary report.
pub fn run_one(cfg: &RunConfig, root: &Path) -> Result<EvalReport> {
    let dir = cfg.run_dir(Some(root));
    let outcome = train(cfg, &dir)?;
    let reports = evaluate(cfg, &outcome.model)?;
    for r in &reports {
        r.write(&dir, &format!("eval_{}", r.meta.protocol.name()))?;
    }
    reports
        .into_iter()
        .next()
        .ok_or_else(|| Error::config("no evaluation protocol configured"))
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub metric: String,
    pub higher_is_better: bool,
    /// Primary report of every successful `(pe, seed)` run.
    pub runs: BTreeMap<(String, u64), EvalReport>,
    /// Seed-aggregated report per method, in listing order; `None` when
    /// any of its runs failed.
    pub table: Vec<(String, Option<EvalReport>)>,
    /// `(a, b, lengths where a beats b)` over aggregated means.
    pub wins: Vec<(String, String, usize)>,
    pub failures: Vec<(String, u64, String)>,
}

impl SweepOutcome {
    pub fn table_csv(&self) -> String {
        let lengths: std::collections::BTreeSet<usize> =
            self.runs.values().flat_map(|r| r.rows.iter().map(|x| x.eval_length)).collect();
        let mut out = String::from("method,eval_length,mean,std,seed_count\n");
        for (pe, agg) in &self.table {
            for &len in &lengths {
                let row = agg
                    .as_ref()
                    .and_then(|r| r.rows.iter().find(|x| x.eval_length == len && x.metric == self.metric));
                match row {
                    Some(r) => {
                        let std = r.std.map(|s| s.to_string()).unwrap_or_default();
                        out.push_str(&format!("{pe},{len},{},{std},{}\n", r.mean, r.seed_count));
                    }
                    None => out.push_str(&format!("{pe},{len},missing,,0\n")),
                }
            }
        }
        out
    }

    pub fn wins_csv(&self) -> String {
        let mut out = String::from("method_a,method_b,lengths_a_wins\n");
        for (a, b, w) in &self.wins {
            out.push_str(&format!("{a},{b},{w}\n"));
        }
        out
    }
}

/// Trains and evaluates every `(pe, seed)` pair on up to `jobs` threads,
/// then aggregates over seeds. Failed runs are recorded, not fatal.
pub fn sweep(base: &RunConfig, pes: &[String], seeds: &[u64], jobs: usize, root: &Path) -> Result<SweepOutcome> {
    if pes.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep needs at least one encoding and one seed"));
    }
    let mut pairs: Vec<(String, u64)> = Vec::new();
    for pe in pes {
        for &seed in seeds {
            if !pairs.contains(&(pe.clone(), seed)) {
                pairs.push((pe.clone(), seed));
            }
        }
    }
    let configs = pairs
        .iter()
        .map(|(pe, seed)| with_pe(base, pe, *seed))
        .collect::<Result<Vec<_>>>()?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<EvalReport>>>> = Mutex::new((0..pairs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, pairs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let r = run_one(&configs[i], root);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });

    let task_run = base.data.task.is_some();
    let mut out = SweepOutcome {
        dir: root.join(format!("sweep-{}", base.config_hash())),
        metric: if task_run { "accuracy" } else { "perplexity" }.to_string(),
        higher_is_better: task_run,
        runs: BTreeMap::new(),
        table: Vec::new(),
        wins: Vec::new(),
        failures: Vec::new(),
    };
    let results = results.into_inner().expect("result lock");
    for ((pe, seed), r) in pairs.into_iter().zip(results) {
        match r.expect("every run visited") {
            Ok(report) => {
                out.runs.insert((pe, seed), report);
            }
            Err(e) => out.failures.push((pe, seed, e.to_string())),
        }
    }
    for pe in pes {
        let reports: Option<Vec<EvalReport>> = seeds.iter().map(|&s| out.runs.get(&(pe.clone(), s)).cloned()).collect();
        let agg = reports.map(|r| seed_aggregate(&r)).transpose()?;
        out.table.push((pe.clone(), agg));
    }
    for (a, ra) in &out.table {
        for (b, rb) in &out.table {
            if a != b {
                if let (Some(ra), Some(rb)) = (ra, rb) {
                    out.wins.push((a.clone(), b.clone(), win_count(ra, rb, &out.metric, out.higher_is_better)));
                }
            }
        }
    }

    std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    let table_path = out.dir.join("sweep.csv");
    std::fs::write(&table_path, out.table_csv()).map_err(|e| Error::io(&table_path, e))?;
    let wins_path = out.dir.join("wins.csv");
    std::fs::write(&wins_path, out.wins_csv()).map_err(|e| Error::io(&wins_path, e))?;
    Ok(out)
}
