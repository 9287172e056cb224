use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::with_pe;
use crate::error::{Error, Result};
use crate::eval::{timing_bench, timing_csv, TimingRow};
use crate::model::{Model, Phase, Session};

/// Attention terms for one (head, query, key) entry of the final query row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub head: usize,
    pub i: usize,
    pub j: usize,
    /// Scaled key-query logit before positional terms.
    pub attention_logit: f64,
    pub static_bias: f64,
    pub dape_correction: Option<f64>,
    /// Pre-softmax logit after all positional terms.
    pub total: f64,
}

pub const BIAS_CSV_HEADER: &str = "head,i,j,attention_logit,static_bias,dape_correction,total";

/// Traces one sequence through `model` and returns the final query row
/// of `layer` for every head, `heads × n` rows.
pub fn dump_bias(model: &Model, tokens: &[usize], layer: usize) -> Result<Vec<BiasRow>> {
    let cfg = &model.config;
    if !cfg.pe.kind.is_additive() {
        return Err(Error::config(format!("`{}` has no additive attention bias to dump", cfg.pe.label())));
    }
    if layer >= cfg.layers {
        return Err(Error::Index {
            what: "layer",
            index: layer,
            size: cfg.layers,
        });
    }
    let n = tokens.len();
    let mut s = Session::traced();
    model.logits(&mut s, tokens, 1, Phase::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
    let trace = s.traces.as_ref().expect("traced session")[layer];
    let scores = s.tape.data(trace.scores);
    let bias = trace.bias.map(|b| s.tape.data(b));
    let corr = trace.correction.map(|c| s.tape.data(c));
    let logits = s.tape.data(trace.logits);
    let i = n - 1;
    let mut rows = Vec::with_capacity(cfg.heads * n);
    for h in 0..cfg.heads {
        for j in 0..n {
            let at = (h * n + i) * n + j;
            rows.push(BiasRow {
                head: h,
                i,
                j,
                attention_logit: scores[at],
                static_bias: bias.map_or(0.0, |b| b[at]),
                dape_correction: corr.map(|c| c[at]),
                total: logits[at],
            });
        }
    }
    Ok(rows)
}

pub fn bias_csv(rows: &[BiasRow]) -> String {
    let mut out = format!("{BIAS_CSV_HEADER}\n");
    for r in rows {
        let c = r.dape_correction.map(|c| c.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.head, r.i, r.j, r.attention_logit, r.static_bias, c, r.total
        ));
    }
    out
}

/// Times each named encoding on the base model shape and writes `bench.csv`
/// into `out`. Ratios are relative to the first DAPE encoding listed, or
/// the first one when none is DAPE.
pub fn bench(base: &RunConfig, pes: &[String], lengths: &[usize], reps: usize, out: &Path) -> Result<Vec<TimingRow>> {
    let longest = lengths.iter().copied().max().unwrap_or(1);
    let configs = pes
        .iter()
        .map(|pe| {
            let mut m = with_pe(base, pe, base.train.seed)?.model_config();
            m.max_train_len = m.max_train_len.max(longest);
            Ok((pe.clone(), m))
        })
        .collect::<Result<Vec<_>>>()?;
    let reference = pes.iter().find(|p| p.starts_with("dape_")).or(pes.first()).cloned().unwrap_or_default();
    let rows = timing_bench(&configs, lengths, reps, base.train.batch, &reference)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("bench.csv");
    std::fs::write(&path, timing_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
