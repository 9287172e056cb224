use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dape_core::harness::{self, RunConfig, CHECKPOINT_FILE};
use dape_core::model::load_checkpoint;
use dape_core::tasks::{lm_example, read_bytes, TaskId};

#[derive(Parser)]
#[command(name = "dape", version, about = "Positional-encoding experiments on small transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; run directories are created beneath it. Falls back to
    /// the config's `out`, then $DAPE_LAB_OUT, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dot-path override, e.g. `model.layers=3` (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> dape_core::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("train.seed={s}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }

    fn root(&self) -> Option<&Path> {
        self.out.as_deref()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and evaluate it.
    Train(Common),
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load; defaults to the run directory's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every encoding over several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated encodings, e.g. `kerple,dape_kerple`.
        #[arg(long, value_delimiter = ',', required = true)]
        pe: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write the final query row's attention terms as CSV.
    DumpBias {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        length: usize,
        /// Text file supplying the input bytes (causal models).
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        offset: usize,
        /// Task supplying a random input (encoder models).
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time forward+backward steps per encoding and length.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        pe: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

fn run(cli: Cli) -> dape_core::Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.load()?;
            let dir = cfg.run_dir(common.root());
            let outcome = harness::train(&cfg, &dir)?;
            for r in harness::evaluate(&cfg, &outcome.model)? {
                r.write(&dir, &format!("eval_{}", r.meta.protocol.name()))?;
            }
            println!("{}", dir.display());
            Ok(true)
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let dir = cfg.run_dir(common.root());
            let ckpt = checkpoint.unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
            std::fs::create_dir_all(&dir).map_err(|e| dape_core::Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            for p in harness::eval_cmd(&cfg, &ckpt, &dir)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Command::Sweep { common, pe, seeds, jobs } => {
            let cfg = common.load()?;
            let root = cfg.out_root(common.root());
            let out = harness::sweep(&cfg, &pe, &seeds, jobs, &root)?;
            print!("{}", out.table_csv());
            for (pe, seed, err) in &out.failures {
                eprintln!("run {pe} seed {seed} failed: {err}");
            }
            println!("{}", out.dir.display());
            Ok(out.failures.is_empty())
        }
        Command::DumpBias {
            checkpoint,
            length,
            text,
            offset,
            task,
            seed,
            layer,
            csv,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let tokens = match (text, task) {
                (Some(path), None) => {
                    let bytes = read_bytes(&path)?;
                    let end = offset + length;
                    if end > bytes.len() {
                        return Err(dape_core::Error::TooShort {
                            needed: end,
                            have: bytes.len(),
                        });
                    }
                    lm_example(&bytes[offset..end]).0
                }
                (None, Some(name)) => {
                    let task = TaskId::parse(&name)
                        .ok_or_else(|| dape_core::Error::Config(format!("unknown task `{name}`")))?;
                    let mut rng = harness::seeded(seed, 0);
                    let inst = task.generate(task.fit_length(length), &mut rng)?;
                    inst.sequence(model.config.placeholder_token())
                }
                _ => return Err(dape_core::Error::Config("give exactly one of --text and --task".into())),
            };
            let rows = harness::dump_bias(&model, &tokens, layer)?;
            let body = harness::bias_csv(&rows);
            match csv {
                Some(p) => std::fs::write(&p, body).map_err(|e| dape_core::Error::Io { path: p, source: e })?,
                None => print!("{body}"),
            }
            Ok(true)
        }
        Command::Bench {
            common,
            pe,
            lengths,
            reps,
        } => {
            let cfg = common.load()?;
            let dir = cfg.run_dir(common.root());
            let rows = harness::bench(&cfg, &pe, &lengths, reps, &dir)?;
            print!("{}", dape_core::eval::timing_csv(&rows));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
