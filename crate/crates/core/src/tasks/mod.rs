//! Training and evaluation data: formal-language tasks and byte-level text.

mod che;
pub mod expr;
mod text;

pub use che::{equation_from_expression, sample_training_length, shuffled_input, TaskClass, TaskId, TaskInstance};
pub use text::{ingest_text, lm_example, read_bytes, TextWindows, BOS, BYTE_VOCAB};

use serde::{Deserialize, Serialize};

/// A task together with its training and evaluation length ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskId,
    pub train_len_max: usize,
    pub eval_len_min: usize,
    pub eval_len_max: usize,
}

impl TaskSpec {
    /// Longest model sequence (input plus answer slots) over a length range.
    pub fn max_sequence_len(&self, max_input: usize) -> usize {
        (1..=max_input)
            .map(|l| {
                let l = self.task.fit_length(l);
                l + self.task.answer_len(l)
            })
            .max()
            .unwrap_or(1)
    }

    /// Supported evaluation lengths within `[eval_len_min, eval_len_max]`.
    pub fn eval_lengths(&self) -> Vec<usize> {
        (self.eval_len_min..=self.eval_len_max)
            .filter(|&l| self.task.supports_len(l))
            .collect()
    }
}
