use dape_core::eval::{
    che_accuracy, last_k_perplexity, length_sweep, non_overlapping_perplexity, time_step, timing_bench,
    AnswerModel, Protocol, ReportMeta,
};
use dape_core::model::{Mode, Model, ModelConfig};
use dape_core::pos_enc::{DapeConfig, PeConfig, PeKind};
use dape_core::tasks::{TaskId, TextWindows, BYTE_VOCAB};
use dape_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn byte_model(kind: PeKind, max_train_len: usize) -> Model {
    let cfg = ModelConfig {
        layers: 1,
        heads: 2,
        d_model: 16,
        vocab_size: BYTE_VOCAB,
        max_train_len,
        pe: PeConfig::new(kind),
        ..ModelConfig::default()
    };
    Model::new(cfg, &mut rng(3)).unwrap()
}

fn task_model(task: TaskId) -> Model {
    let cfg = ModelConfig {
        layers: 1,
        heads: 2,
        d_model: 16,
        vocab_size: task.model_vocab(),
        output_size: Some(task.output_alphabet().len()),
        max_train_len: 64,
        mode: Mode::EncoderPlaceholder,
        pe: PeConfig::new(PeKind::Kerple),
        ..ModelConfig::default()
    };
    Model::new(cfg, &mut rng(4)).unwrap()
}

fn text(len: usize, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    (0..len).map(|_| r.gen_range(b'a'..=b'z')).collect()
}

fn meta(protocol: Protocol) -> ReportMeta {
    ReportMeta {
        pe: "kerple".into(),
        config_hash: "test".into(),
        protocol,
    }
}

#[test]
fn untrained_byte_model_is_near_uniform() {
    let model = byte_model(PeKind::Kerple, 64);
    let w = TextWindows::from_bytes(&text(256, 1), 64, 16).unwrap();
    let p = last_k_perplexity(&model, &w, 2).unwrap();
    assert!((p.perplexity / 256.0 - 1.0).abs() < 0.2, "ppl {}", p.perplexity);
}

#[test]
fn last_k_scores_exactly_k_per_window() {
    let model = byte_model(PeKind::Alibi, 64);
    let bytes = text(1024, 2);
    for eval_len in [32, 64] {
        let mut w = TextWindows::from_bytes(&bytes, eval_len, 16).unwrap();
        w.windows.truncate(4);
        let p = last_k_perplexity(&model, &w, 3).unwrap();
        assert_eq!(p.scored_tokens, 16 * 4);
        assert_eq!(p.windows, 4);
    }
}

#[test]
fn full_window_last_k_equals_non_overlapping() {
    let model = byte_model(PeKind::Alibi, 64);
    let bytes = text(96, 3);
    let w = TextWindows::from_bytes(&bytes, 32, 32).unwrap();
    let a = last_k_perplexity(&model, &w, 2).unwrap();
    let b = non_overlapping_perplexity(&model, &bytes, 32, 2).unwrap();
    assert_eq!(a.scored_tokens, b.scored_tokens);
    assert!((a.mean_nll - b.mean_nll).abs() < 1e-12);
}

#[test]
fn non_overlapping_single_segment_when_longer_than_text() {
    let model = byte_model(PeKind::Nope, 8);
    let bytes = text(20, 4);
    let p = non_overlapping_perplexity(&model, &bytes, 50, 1).unwrap();
    assert_eq!(p.windows, 1);
    assert_eq!(p.scored_tokens, 20);
    let q = non_overlapping_perplexity(&model, &bytes, 8, 4).unwrap();
    assert_eq!((q.windows, q.scored_tokens), (3, 20));
}

#[test]
fn empty_inputs_are_contract_errors() {
    let model = byte_model(PeKind::Nope, 8);
    let mut w = TextWindows::from_bytes(&text(16, 5), 8, 4).unwrap();
    w.windows.clear();
    assert!(matches!(last_k_perplexity(&model, &w, 1), Err(Error::Contract(_))));
    assert!(matches!(non_overlapping_perplexity(&model, &[], 8, 1), Err(Error::Contract(_))));
}

#[test]
fn untrained_model_sits_at_random_baseline_on_even_pairs() {
    let task = TaskId::EvenPairs;
    let model = task_model(task);
    let r = che_accuracy(&model, task, &[10, 11], 1000, 50, &mut rng(6), meta(Protocol::Accuracy)).unwrap();
    let acc = r.mean_over_lengths("accuracy").unwrap();
    assert!((acc - task.random_baseline()).abs() < 0.05, "accuracy {acc}");
}

/// Answers with the reference solver, ignoring any learned weights.
struct Oracle;

impl AnswerModel for Oracle {
    fn check_task(&self, _task: TaskId) -> Result<()> {
        Ok(())
    }

    fn predict(&self, task: TaskId, inputs: &[usize], batch: usize, _answer_len: usize) -> Result<Vec<usize>> {
        let m = inputs.len() / batch;
        let mut out = Vec::new();
        for row in inputs.chunks_exact(m) {
            out.extend(task.solve(row)?);
        }
        Ok(out)
    }
}

#[test]
fn oracle_predictor_scores_one() {
    for task in [TaskId::ReverseString, TaskId::BinaryAddition, TaskId::StackManipulation] {
        let lens: Vec<usize> = (5..9).filter(|&l| task.supports_len(l)).collect();
        let r = che_accuracy(&Oracle, task, &lens, 20, 7, &mut rng(7), meta(Protocol::Accuracy)).unwrap();
        assert_eq!(r.rows.len(), lens.len());
        assert!(r.rows.iter().all(|row| row.mean == 1.0), "{task}");
    }
}

#[test]
fn vocabulary_mismatch_is_a_config_error() {
    let model = task_model(TaskId::EvenPairs);
    let err = che_accuracy(&model, TaskId::BucketSort, &[5], 4, 4, &mut rng(8), meta(Protocol::Accuracy));
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn length_sweep_rows_ascend() {
    let model = byte_model(PeKind::Nope, 16);
    let bytes = text(512, 9);
    let sweep = |model: &Model, lens: &[usize]| {
        length_sweep(lens, meta(Protocol::LastK), "perplexity", |len| {
            let mut w = TextWindows::from_bytes(&bytes, len, 8)?;
            w.windows.truncate(2);
            Ok(last_k_perplexity(model, &w, 2)?.perplexity)
        })
    };
    let r = sweep(&model, &[128, 32, 64]).unwrap();
    assert_eq!(r.lengths(), vec![32, 64, 128]);
    assert_eq!(r, sweep(&model, &[32, 64, 128]).unwrap());

    let ape = byte_model(PeKind::LearnedApe, 32);
    assert!(matches!(sweep(&ape, &[32, 64]), Err(Error::UnsupportedLength { len: 64, .. })));
}

fn timing_config(dape: Option<usize>) -> ModelConfig {
    let mut pe = PeConfig::new(PeKind::Kerple);
    if let Some(hidden) = dape {
        pe = pe.with_dape(DapeConfig {
            hidden,
            ..DapeConfig::default()
        });
    }
    ModelConfig {
        layers: 1,
        heads: 2,
        d_model: 16,
        max_train_len: 32,
        pe,
        ..ModelConfig::default()
    }
}

#[test]
fn timing_rows_are_normalised_to_the_reference() {
    let configs = vec![
        ("kerple".to_string(), timing_config(None)),
        ("dape_kerple".to_string(), timing_config(Some(8))),
    ];
    let rows = timing_bench(&configs, &[16, 32], 3, 1, "dape_kerple").unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows.iter().filter(|r| r.pe == "dape_kerple") {
        assert_eq!(r.ratio, 1.0);
    }
    assert!(rows.iter().all(|r| r.ms > 0.0));
}

#[test]
fn timing_needs_three_reps() {
    let mut model = Model::new(timing_config(None), &mut rng(0)).unwrap();
    assert!(matches!(time_step(&mut model, 8, 1, 2), Err(Error::Contract(_))));
}
