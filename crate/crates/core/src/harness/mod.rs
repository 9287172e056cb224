//! Run configuration, training loop and experiment orchestration.

mod config;
mod inspect;
mod run;
mod train;

pub use config::{apply_override, DataConfig, DataKind, EvalConfig, OptimConfig, RunConfig, TrainConfig, OUT_ENV};
pub use inspect::{bench, bias_csv, dump_bias, BiasRow, BIAS_CSV_HEADER};
pub use run::{eval_cmd, evaluate, run_one, sweep, with_pe, SweepOutcome};
pub use train::{read_metrics, seeded, train, MetricsLine, TrainOutcome, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE};
