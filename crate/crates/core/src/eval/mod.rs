//! Metrics and evaluation protocols.

mod che;
mod perplexity;
mod report;
mod timing;

pub use che::{che_accuracy, AnswerModel};
pub use perplexity::{last_k_perplexity, non_overlapping_perplexity, Perplexity};
pub use report::{seed_aggregate, win_count, EvalReport, Protocol, ReportMeta, ReportRow, CSV_HEADER};
pub use timing::{time_step, timing_bench, timing_csv, TimingRow, WARMUP_STEPS};

use crate::error::Result;

/// Evaluates `metric_fn` at each length (sorted, deduplicated) into one report.
pub fn length_sweep(
    lengths: &[usize],
    meta: ReportMeta,
    metric: &str,
    mut metric_fn: impl FnMut(usize) -> Result<f64>,
) -> Result<EvalReport> {
    let mut lens = lengths.to_vec();
    lens.sort_unstable();
    lens.dedup();
    let mut report = EvalReport::new(meta);
    for len in lens {
        report.push(len, metric, metric_fn(len)?);
    }
    Ok(report)
}

/// Evaluation lengths `train_len × {1, 2, 4, 8, 16}`.
pub fn default_sweep_lengths(train_len: usize) -> Vec<usize> {
    [1, 2, 4, 8, 16].iter().map(|m| m * train_len).collect()
}
