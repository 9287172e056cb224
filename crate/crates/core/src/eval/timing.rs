use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Phase, Session};

pub const WARMUP_STEPS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub pe: String,
    pub length: usize,
    /// Median wall time of one forward+backward step.
    pub ms: f64,
    /// `ms` divided by the reference row at the same length.
    pub ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Median milliseconds of a forward+backward step on random tokens.
pub fn time_step(model: &mut Model, len: usize, batch: usize, reps: usize) -> Result<f64> {
    if reps < 3 {
        return Err(Error::contract("timing needs at least 3 repetitions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
    let v = model.config.vocab_size;
    let tokens: Vec<usize> = (0..batch * len).map(|_| rng.gen_range(0..v)).collect();
    let targets: Vec<usize> = (0..batch * len).map(|_| rng.gen_range(0..model.config.output_size())).collect();
    let mask = vec![true; targets.len()];
    let mut times = Vec::with_capacity(reps);
    for rep in 0..WARMUP_STEPS + reps {
        let start = Instant::now();
        let mut s = Session::new();
        let logits = model.logits(&mut s, &tokens, batch, Phase::Eval, &mut rng)?;
        let loss = s.tape.cross_entropy(logits, &targets, &mask)?;
        s.backward(loss, &mut model.params)?;
        drop(s);
        let ms = start.elapsed().as_secs_f64() * 1e3;
        model.params.zero_grad();
        if rep >= WARMUP_STEPS {
            times.push(ms);
        }
    }
    Ok(median(times))
}

/// Times every `(label, config)` pair at every length. Ratios are taken
/// against the row labelled `reference` at the same length, or the first
/// config when no label matches.
pub fn timing_bench(
    configs: &[(String, ModelConfig)],
    lengths: &[usize],
    reps: usize,
    batch: usize,
    reference: &str,
) -> Result<Vec<TimingRow>> {
    if configs.is_empty() {
        return Err(Error::contract("no configurations to time"));
    }
    let ref_idx = configs.iter().position(|(l, _)| l == reference).unwrap_or(0);
    let mut models = configs
        .iter()
        .map(|(_, c)| Model::new(c.clone(), &mut ChaCha8Rng::seed_from_u64(0)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &len in lengths {
        let ms = models
            .iter_mut()
            .map(|m| time_step(m, len, batch, reps))
            .collect::<Result<Vec<_>>>()?;
        for ((label, _), &t) in configs.iter().zip(&ms) {
            rows.push(TimingRow {
                pe: label.clone(),
                length: len,
                ms: t,
                ratio: t / ms[ref_idx],
            });
        }
    }
    Ok(rows)
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("pe,length,ms,ratio\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.4},{:.4}\n", r.pe, r.length, r.ms, r.ratio));
    }
    out
}
