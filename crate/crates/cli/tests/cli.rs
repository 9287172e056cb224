use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn dape(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dape"))
        .args(args)
        .env_remove("DAPE_LAB_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    let text = r#"
[data]
task = "reverse_string"

[model]
layers = 1
heads = 2
d_model = 16

[model.pe]
kind = "kerple"

[train]
steps = 4
batch = 2
train_len = 6

[eval]
lengths = [6, 8]
samples = 4
"#;
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_eval_and_dump_bias() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out_root = dir.path().join("runs");
    let root = out_root.to_str().unwrap();

    let out = dape(&["train", "--config", cfg, "--out", root, "--seed", "2", "--override", "model.pe.dape={}"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = PathBuf::from(stdout(&out).trim());
    assert!(run.starts_with(&out_root));
    assert!(run.file_name().unwrap().to_str().unwrap().ends_with("-s2"));
    for f in ["checkpoint.bin", "config.toml", "metrics.jsonl", "eval_accuracy.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l["loss"].as_f64().unwrap().is_finite()));

    let out = dape(&["eval", "--config", cfg, "--out", root, "--seed", "2", "--override", "model.pe.dape={}"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("eval_accuracy.csv"));

    let ckpt = run.join("checkpoint.bin");
    let out = dape(&["dump-bias", "--checkpoint", ckpt.to_str().unwrap(), "--task", "reverse_string", "--length", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = stdout(&out);
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("head,i,j,"));
    // Two heads over one query row of 4 inputs and 4 answer slots.
    assert_eq!(csv.lines().count(), 1 + 2 * 8);
}

#[test]
fn mismatched_checkpoint_and_bad_override_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let root = dir.path().join("runs");
    let root = root.to_str().unwrap();

    let out = dape(&["train", "--config", cfg, "--override", "model.layers=\"two\""]);
    assert_eq!(out.status.code(), Some(2));

    let out = dape(&["train", "--config", cfg, "--out", root]);
    assert!(out.status.success());
    let ckpt = PathBuf::from(stdout(&out).trim()).join("checkpoint.bin");
    let out = dape(&[
        "eval",
        "--config",
        cfg,
        "--out",
        root,
        "--override",
        "model.layers=2",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layers"));
}

#[test]
fn sweep_reports_failed_runs_with_exit_one() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path());
    let root = dir.path().join("runs");
    let out = dape(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        root.to_str().unwrap(),
        "--pe",
        "alibi,learned_ape",
        "--seeds",
        "0,1",
        "--override",
        "eval.lengths=[6, 40]",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let table = stdout(&out);
    assert!(table.contains("learned_ape,40,missing"), "{table}");
    assert!(table.lines().any(|l| l.starts_with("alibi,40,")));
}
