use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Full windows as context, only the final `k` tokens scored.
    LastK,
    /// Disjoint segments, every token scored.
    NonOverlapping,
    /// Per-token accuracy over answer slots.
    Accuracy,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::LastK => "last_k",
            Protocol::NonOverlapping => "non_overlapping",
            Protocol::Accuracy => "accuracy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub eval_length: usize,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; present only with two or more seeds.
    pub std: Option<f64>,
    pub seed_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub pe: String,
    pub config_hash: String,
    pub protocol: Protocol,
}

/// Metric rows for one method, ordered by evaluation length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub rows: Vec<ReportRow>,
}

pub const CSV_HEADER: &str = "eval_length,metric,mean,std,seed_count,pe,config_hash,protocol";

impl EvalReport {
    pub fn new(meta: ReportMeta) -> Self {
        EvalReport { meta, rows: Vec::new() }
    }

    /// Appends a single-run row.
    pub fn push(&mut self, eval_length: usize, metric: &str, value: f64) {
        self.rows.push(ReportRow {
            eval_length,
            metric: metric.to_string(),
            mean: value,
            std: None,
            seed_count: 1,
        });
    }

    pub fn lengths(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.rows.iter().map(|r| r.eval_length).collect();
        v.dedup();
        v
    }

    pub fn value(&self, eval_length: usize, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.eval_length == eval_length && r.metric == metric)
            .map(|r| r.mean)
    }

    /// Mean of a metric across all lengths, each length weighted equally.
    pub fn mean_over_lengths(&self, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.metric == metric).map(|r| r.mean).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let std = r.std.map(|s| s.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.eval_length,
                r.metric,
                r.mean,
                std,
                r.seed_count,
                self.meta.pe,
                self.meta.config_hash,
                self.meta.protocol.name()
            )
            .expect("writing to a string");
        }
        out
    }

    /// One JSON object per row, metadata inlined.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            let v = serde_json::json!({
                "eval_length": r.eval_length,
                "metric": r.metric,
                "mean": r.mean,
                "std": r.std,
                "seed_count": r.seed_count,
                "pe": self.meta.pe,
                "config_hash": self.meta.config_hash,
                "protocol": self.meta.protocol,
            });
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `<stem>.csv` and `<stem>.jsonl` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let jsonl = dir.join(format!("{stem}.jsonl"));
        std::fs::write(&jsonl, self.to_jsonl()?).map_err(|e| Error::io(&jsonl, e))
    }
}

/// Per-length mean and sample standard deviation across seeds.
pub fn seed_aggregate(runs: &[EvalReport]) -> Result<EvalReport> {
    let first = runs.first().ok_or_else(|| Error::contract("no runs to aggregate"))?;
    for r in runs {
        if r.meta != first.meta {
            return Err(Error::contract(format!(
                "cannot aggregate {} ({}) with {} ({})",
                r.meta.pe, r.meta.config_hash, first.meta.pe, first.meta.config_hash
            )));
        }
        let keys = |rep: &EvalReport| -> Vec<(usize, String)> {
            rep.rows.iter().map(|x| (x.eval_length, x.metric.clone())).collect()
        };
        if keys(r) != keys(first) {
            return Err(Error::contract("runs disagree on lengths or metrics"));
        }
    }
    let n = runs.len();
    let rows = (0..first.rows.len())
        .map(|i| {
            let vals: Vec<f64> = runs.iter().map(|r| r.rows[i].mean).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let std = (n >= 2).then(|| {
                let ss: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum();
                (ss / (n - 1) as f64).sqrt()
            });
            ReportRow {
                eval_length: first.rows[i].eval_length,
                metric: first.rows[i].metric.clone(),
                mean,
                std,
                seed_count: runs.iter().map(|r| r.rows[i].seed_count).sum(),
            }
        })
        .collect();
    Ok(EvalReport {
        meta: first.meta.clone(),
        rows,
    })
}

/// Number of shared lengths at which `a` strictly beats `b` on `metric`.
pub fn win_count(a: &EvalReport, b: &EvalReport, metric: &str, higher_is_better: bool) -> usize {
    a.rows
        .iter()
        .filter(|r| r.metric == metric)
        .filter_map(|r| b.value(r.eval_length, metric).map(|other| (r.mean, other)))
        .filter(|&(x, y)| if higher_is_better { x > y } else { x < y })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(vals: &[(usize, f64)]) -> EvalReport {
        let mut r = EvalReport::new(ReportMeta {
            pe: "kerple".into(),
            config_hash: "abc".into(),
            protocol: Protocol::LastK,
        });
        for &(l, v) in vals {
            r.push(l, "ppl", v);
        }
        r
    }

    #[test]
    fn single_run_has_no_std() {
        let agg = seed_aggregate(&[report(&[(32, 3.0)])]).unwrap();
        assert_eq!(agg.rows[0].std, None);
        assert_eq!(agg.rows[0].seed_count, 1);
    }

    #[test]
    fn identical_runs_have_zero_std() {
        let r = report(&[(32, 3.5), (64, 4.0)]);
        let agg = seed_aggregate(&[r.clone(), r.clone(), r]).unwrap();
        assert!(agg.rows.iter().all(|x| x.std == Some(0.0) && x.seed_count == 3));
    }

    #[test]
    fn hand_computed_mean_and_std() {
        let runs: Vec<_> = [3.0, 4.0, 5.0].iter().map(|&v| report(&[(32, v)])).collect();
        let agg = seed_aggregate(&runs).unwrap();
        assert_eq!(agg.rows[0].mean, 4.0);
        assert_eq!(agg.rows[0].std, Some(1.0));
    }

    #[test]
    fn mismatched_runs_rejected() {
        let a = report(&[(32, 3.0)]);
        let mut b = report(&[(32, 3.0)]);
        b.meta.config_hash = "other".into();
        assert!(matches!(seed_aggregate(&[a.clone(), b]), Err(Error::Contract(_))));
        let c = report(&[(64, 3.0)]);
        assert!(matches!(seed_aggregate(&[a, c]), Err(Error::Contract(_))));
        assert!(seed_aggregate(&[]).is_err());
    }

    #[test]
    fn wins_and_serialization() {
        let a = report(&[(32, 3.0), (64, 5.0), (128, 7.0)]);
        let b = report(&[(32, 4.0), (64, 5.0), (128, 6.0)]);
        assert_eq!(win_count(&a, &b, "ppl", false), 1);
        assert_eq!(win_count(&a, &b, "ppl", true), 1);
        let csv = a.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("64,ppl,5,,1,kerple,abc,last_k"));
        let jsonl = a.to_jsonl().unwrap();
        let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(first["protocol"], "last_k");
        assert_eq!(first["std"], serde_json::Value::Null);
        assert_eq!(a.mean_over_lengths("ppl"), Some(5.0));
    }
}
