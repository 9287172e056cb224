use rand::Rng;

use super::report::{EvalReport, ReportMeta};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, Phase, Session};
use crate::tasks::TaskId;

/// Anything that answers formal-language task inputs slot by slot.
pub trait AnswerModel {
    /// Checks that the predictor fits `task`'s vocabularies.
    fn check_task(&self, task: TaskId) -> Result<()>;

    /// Predicted answer tokens, `batch·answer_len` of them, for `batch`
    /// equal-length inputs laid out row-major.
    fn predict(&self, task: TaskId, inputs: &[usize], batch: usize, answer_len: usize) -> Result<Vec<usize>>;
}

impl AnswerModel for Model {
    fn check_task(&self, task: TaskId) -> Result<()> {
        let c = &self.config;
        if c.mode != Mode::EncoderPlaceholder
            || c.vocab_size != task.model_vocab()
            || c.output_size() != task.output_alphabet().len()
        {
            return Err(Error::config(format!(
                "model (vocab {}, outputs {}) does not fit task {task} (vocab {}, outputs {})",
                c.vocab_size,
                c.output_size(),
                task.model_vocab(),
                task.output_alphabet().len()
            )));
        }
        Ok(())
    }

    fn predict(&self, _task: TaskId, inputs: &[usize], batch: usize, answer_len: usize) -> Result<Vec<usize>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut s = Session::new();
        let v = self.placeholder_logits(&mut s, inputs, batch, answer_len, Phase::Eval, &mut rng)?;
        let k = self.config.output_size();
        Ok(s.tape
            .data(v)
            .chunks_exact(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                    .0
            })
            .collect())
    }
}

/// Per-token accuracy over answer slots at each length, plus a `mean`
/// row at length 0 averaging the lengths uniformly.
pub fn che_accuracy<P: AnswerModel, R: Rng>(
    model: &P,
    task: TaskId,
    lengths: &[usize],
    samples_per_length: usize,
    batch: usize,
    rng: &mut R,
    meta: ReportMeta,
) -> Result<EvalReport> {
    model.check_task(task)?;
    if samples_per_length == 0 {
        return Err(Error::contract("need at least one sample per length"));
    }
    let mut report = EvalReport::new(meta);
    for &len in lengths {
        let (mut correct, mut total) = (0usize, 0usize);
        let mut left = samples_per_length;
        while left > 0 {
            let b = left.min(batch.max(1));
            left -= b;
            let insts = (0..b).map(|_| task.generate(len, rng)).collect::<Result<Vec<_>>>()?;
            let inputs: Vec<usize> = insts.iter().flat_map(|i| i.input.iter().copied()).collect();
            let ans = task.answer_len(len);
            let pred = model.predict(task, &inputs, b, ans)?;
            for (inst, p) in insts.iter().zip(pred.chunks_exact(ans)) {
                correct += inst.target.iter().zip(p).filter(|(t, q)| t == q).count();
                total += ans;
            }
        }
        report.push(len, "accuracy", correct as f64 / total as f64);
    }
    Ok(report)
}
