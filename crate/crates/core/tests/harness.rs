use std::path::{Path, PathBuf};

use dape_core::harness::{
    apply_override, bench, dump_bias, eval_cmd, read_metrics, sweep, train, with_pe, RunConfig, OUT_ENV,
};
use dape_core::model::{load_checkpoint, Model};
use dape_core::tasks::{lm_example, TaskId};
use dape_core::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const WORDS: &[&str] = &[
    "the", "model", "reads", "a", "long", "sequence", "and", "attends", "to", "every", "earlier", "token", "with", "a",
    "bias", "that", "depends", "on", "distance", "of", "keys", "from", "queries", "while", "heads", "learn",
];

/// Deterministic word salad, `len` bytes long.
fn corpus(dir: &Path, len: usize) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut s = String::new();
    while s.len() < len {
        s.push_str(WORDS.choose(&mut rng).unwrap());
        s.push(if rng.gen_bool(0.1) { '.' } else { ' ' });
    }
    s.truncate(len);
    let p = dir.join("corpus.txt");
    std::fs::write(&p, s).unwrap();
    p
}

fn lm_config(corpus: &Path, extra: &[&str]) -> RunConfig {
    let mut o: Vec<String> = vec![
        format!("data.corpus={:?}", corpus.display().to_string()),
        "model.layers=1".into(),
        "model.d_model=16".into(),
        "model.heads=2".into(),
        "train.steps=6".into(),
        "train.batch=2".into(),
        "train.train_len=16".into(),
        "eval.lengths=[16, 32]".into(),
        "eval.max_windows=2".into(),
    ];
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(None, &o).unwrap()
}

#[test]
fn unknown_keys_and_bad_types_are_rejected() {
    assert!(matches!(RunConfig::from_toml("[model]\nlayerz = 2\n"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("bogus = 1\n"), Err(Error::Config(_))));
    let err = RunConfig::load(None, &["train.steps=\"many\"".into(), "data.task=\"parity_check\"".into()]);
    assert!(matches!(err, Err(Error::Config(_))));
    assert!(matches!(RunConfig::load(None, &[]), Err(Error::Config(_))), "no data source");
}

#[test]
fn overrides_follow_dot_paths() {
    let mut t = toml::Table::new();
    apply_override(&mut t, "model.pe.kind=alibi").unwrap();
    apply_override(&mut t, "model.layers = 3").unwrap();
    apply_override(&mut t, "eval.lengths=[8,16]").unwrap();
    apply_override(&mut t, "data.task=reverse_string").unwrap();
    let cfg: RunConfig = toml::Value::Table(t).try_into().unwrap();
    assert_eq!(cfg.model.layers, 3);
    assert_eq!(cfg.model.pe.label(), "alibi");
    assert_eq!(cfg.eval.lengths, vec![8, 16]);
    assert_eq!(cfg.data.task, Some(TaskId::ReverseString));
    assert!(apply_override(&mut toml::Table::new(), "no_equals").is_err());
    let mut t = toml::Table::new();
    apply_override(&mut t, "a=1").unwrap();
    assert!(apply_override(&mut t, "a.b=1").is_err());
}

#[test]
fn config_round_trips_through_toml() {
    let dir = TempDir::new().unwrap();
    let cfg = lm_config(&corpus(dir.path(), 1000), &["model.pe.kind=\"fire\""]);
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn hash_ignores_seed_and_run_dir_uses_it() {
    let dir = TempDir::new().unwrap();
    let c = corpus(dir.path(), 1000);
    let a = lm_config(&c, &["train.seed=1"]);
    let b = lm_config(&c, &["train.seed=2"]);
    let other = lm_config(&c, &["model.layers=2"]);
    assert_eq!(a.config_hash(), b.config_hash());
    assert_ne!(a.config_hash(), other.config_hash());
    let root = dir.path().join("out");
    assert_eq!(a.run_dir(Some(&root)), root.join(format!("{}-s1", a.config_hash())));
    std::env::set_var(OUT_ENV, dir.path().join("env"));
    assert!(a.run_dir(None).starts_with(dir.path().join("env")));
}

#[test]
fn warmup_is_linear_over_one_percent() {
    let cfg = lm_config(Path::new("x"), &[]);
    let o = cfg.optim;
    assert!((o.lr_at(1, 1000) - o.lr / 10.0).abs() < 1e-15);
    assert_eq!(o.lr_at(10, 1000), o.lr);
    assert_eq!(o.lr_at(500, 1000), o.lr);
    assert_eq!(o.lr_at(1, 50), o.lr);
}

#[test]
fn training_reduces_loss() {
    let dir = TempDir::new().unwrap();
    let c = corpus(dir.path(), 100_000);
    let cfg = RunConfig::load(
        None,
        &[
            format!("data.corpus={:?}", c.display().to_string()),
            "model.layers=2".into(),
            "model.d_model=64".into(),
            "train.steps=200".into(),
            "train.train_len=32".into(),
            "optim.lr=3e-3".into(),
        ],
    )
    .unwrap();
    let out = train(&cfg, &dir.path().join("run")).unwrap();
    let head: f64 = out.losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = out.losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.8 * head, "loss {head} -> {tail}");
    let log = read_metrics(&out.metrics).unwrap();
    assert_eq!(log.len(), 200);
    assert!(log.windows(2).all(|w| w[0].step < w[1].step));
}

fn strip_wall(path: &Path) -> Vec<(usize, u64, u64, u64)> {
    read_metrics(path)
        .unwrap()
        .into_iter()
        .map(|m| (m.step, m.loss.to_bits(), m.lr.to_bits(), m.grad_norm.to_bits()))
        .collect()
}

#[test]
fn same_seed_same_bits() {
    let dir = TempDir::new().unwrap();
    let c = corpus(dir.path(), 4000);
    let cfg = lm_config(&c, &["model.pe.kind=\"randomized_rope\"", "model.dropout=0.1", "train.checkpoint_every=2"]);
    let a = train(&cfg, &dir.path().join("a")).unwrap();
    let b = train(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(std::fs::read(&a.checkpoint).unwrap(), std::fs::read(&b.checkpoint).unwrap());
    assert_eq!(strip_wall(&a.metrics), strip_wall(&b.metrics));
    let c2 = train(&lm_config(&c, &["model.pe.kind=\"randomized_rope\"", "model.dropout=0.1", "train.seed=1"]), &dir.path().join("c")).unwrap();
    assert_ne!(std::fs::read(&a.checkpoint).unwrap(), std::fs::read(&c2.checkpoint).unwrap());
}

#[test]
fn task_training_writes_snapshots() {
    let dir = TempDir::new().unwrap();
    let cfg = RunConfig::load(
        None,
        &[
            "data.task=\"parity_check\"".into(),
            "model.layers=1".into(),
            "model.d_model=16".into(),
            "train.steps=4".into(),
            "train.train_len=6".into(),
            "train.eval_every=2".into(),
            "eval.samples=8".into(),
        ],
    )
    .unwrap();
    let out = train(&cfg, dir.path()).unwrap();
    let log = read_metrics(&out.metrics).unwrap();
    assert!(log[0].eval.is_none() && log[1].eval.is_some());
    assert_eq!(out.model.config.vocab_size, TaskId::ParityCheck.model_vocab());
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let dir = TempDir::new().unwrap();
    let c = corpus(dir.path(), 1000);
    let cfg = lm_config(&c, &["model.init_std=1e200"]);
    match train(&cfg, &dir.path().join("run")) {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
    assert!(dir.path().join("run/nonfinite.json").exists());
}

#[test]
fn dape_kerple_extrapolates_sixteenfold() {
    let dir = TempDir::new().unwrap();
    let c = corpus(dir.path(), 4000);
    let cfg = lm_config(&c, &["train.train_len=32", "eval.lengths=[512]", "eval.max_windows=1"]);
    let cfg = with_pe(&cfg, "dape_kerple", 0).unwrap();
    let run = cfg.run_dir(Some(dir.path()));
    let out = train(&cfg, &run).unwrap();
    let files = eval_cmd(&cfg, &out.checkpoint, &run).unwrap();
    let csv = std::fs::read_to_string(&files[0]).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("512,perplexity,"));
}

#[test]
fn eval_cmd_emits_requested_protocols_deterministically() {
    let dir = TempDir::new().unwrap();
    let c = corpus(dir.path(), 4000);
    let cfg = lm_config(&c, &["eval.protocols=[\"last_k\", \"non_overlapping\"]", "eval.k=8"]);
    let out = train(&cfg, &dir.path().join("run")).unwrap();
    let files = eval_cmd(&cfg, &out.checkpoint, &dir.path().join("ev")).unwrap();
    let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(
        names,
        ["eval_last_k.csv", "eval_last_k.jsonl", "eval_non_overlapping.csv", "eval_non_overlapping.jsonl"]
    );
    let first: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert!(String::from_utf8_lossy(&first[0]).contains(&cfg.config_hash()));
    eval_cmd(&cfg, &out.checkpoint, &dir.path().join("ev")).unwrap();
    let second: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(first, second);

    let other = lm_config(&c, &["model.pe.kind=\"alibi\""]);
    assert!(matches!(
        eval_cmd(&other, &out.checkpoint, dir.path()),
        Err(Error::CheckpointMismatch(_))
    ));
}

#[test]
fn sweep_cardinality_duplicates_and_failures() {
    let dir = TempDir::new().unwrap();
    let c = corpus(dir.path(), 4000);
    let cfg = lm_config(&c, &["train.steps=2"]);
    let pes: Vec<String> = ["kerple", "dape_kerple", "kerple"].map(String::from).to_vec();
    let out = sweep(&cfg, &pes, &[0, 1, 2], 2, dir.path()).unwrap();
    assert_eq!(out.runs.len(), 6);
    assert!(out.failures.is_empty());
    assert_eq!(out.table.len(), 3);
    assert_eq!(out.table[0].1, out.table[2].1);
    assert_eq!(out.table[0].1.as_ref().unwrap().rows[0].seed_count, 3);
    assert!(out.dir.join("sweep.csv").exists() && out.dir.join("wins.csv").exists());
    assert!(out.wins.iter().any(|(a, b, _)| a == "dape_kerple" && b == "kerple"));

    // A learned table cannot be evaluated past the training length.
    let out = sweep(&cfg, &["learned_ape".to_string(), "alibi".to_string()], &[0], 1, dir.path()).unwrap();
    assert_eq!(out.failures.len(), 1);
    assert!(out.table[0].1.is_none());
    assert!(out.table_csv().contains("learned_ape,16,missing"));
}

fn trained(dir: &Path, pe: &str) -> Model {
    let c = corpus(dir, 4000);
    let cfg = with_pe(&lm_config(&c, &[]), pe, 0).unwrap();
    let out = train(&cfg, &dir.join(pe)).unwrap();
    load_checkpoint(&out.checkpoint).unwrap()
}

#[test]
fn bias_dump_shapes_and_adaptivity() {
    let dir = TempDir::new().unwrap();
    let tokens = |s: &[u8]| lm_example(s).0;
    let kerple = trained(dir.path(), "kerple");
    let rows = dump_bias(&kerple, &tokens(b"static bias only"), 0).unwrap();
    assert_eq!(rows.len(), 2 * 16);
    assert!(rows.iter().all(|r| r.dape_correction.is_none() && r.i == 15));

    let mut dape = trained(dir.path(), "dape_kerple");
    // Random non-zero correction weights make the dependence on content visible.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, p) in dape.params.iter_mut() {
        if name.contains("dape.") {
            *p = dape_core::tensor::Tensor::normal(p.shape(), 0.5, &mut rng).with_grad();
        }
    }
    let a = dump_bias(&dape, &tokens(b"first input text"), 0).unwrap();
    let b = dump_bias(&dape, &tokens(b"other input here"), 0).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| x.dape_correction != y.dape_correction));
    assert!(a.iter().zip(&b).all(|(x, y)| x.static_bias == y.static_bias));
    for r in &a {
        let sum = r.attention_logit + r.static_bias + r.dape_correction.unwrap();
        assert!((sum - r.total).abs() < 1e-12);
    }

    let rope = trained(dir.path(), "rope");
    assert!(matches!(dump_bias(&rope, &tokens(b"abc"), 0), Err(Error::Config(_))));
}

#[test]
fn bench_writes_ratio_table() {
    let dir = TempDir::new().unwrap();
    let cfg = lm_config(&corpus(dir.path(), 1000), &["train.batch=1"]);
    let pes = vec!["alibi".to_string(), "dape_alibi".to_string()];
    let rows = bench(&cfg, &pes, &[8, 16], 3, dir.path()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().filter(|r| r.pe == "dape_alibi").all(|r| r.ratio == 1.0));
    assert!(dir.path().join("bench.csv").exists());
}
