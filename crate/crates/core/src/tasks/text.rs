//! Byte-level text ingestion for language-model evaluation.

use std::path::Path;

use crate::error::{Error, Result};

/// Begin-of-sequence token, right after the 256 byte values.
pub const BOS: usize = 256;
pub const BYTE_VOCAB: usize = 257;

/// Model input and next-token targets for one byte window: the input is
/// the window shifted right behind [`BOS`].
pub fn lm_example(window: &[u8]) -> (Vec<usize>, Vec<usize>) {
    let targets: Vec<usize> = window.iter().map(|&b| b as usize).collect();
    let mut input = Vec::with_capacity(window.len());
    input.push(BOS);
    input.extend(&targets[..targets.len().saturating_sub(1)]);
    (input, targets)
}

/// Disjoint `eval_len`-byte windows, each scored on its final `k` positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextWindows {
    pub eval_len: usize,
    pub k: usize,
    pub windows: Vec<Vec<u8>>,
    /// Trailing bytes that did not fill a window.
    pub dropped: usize,
}

impl TextWindows {
    pub fn from_bytes(bytes: &[u8], eval_len: usize, k: usize) -> Result<Self> {
        if k == 0 || eval_len < k {
            return Err(Error::config(format!("need 0 < k <= eval_len, got k={k}, eval_len={eval_len}")));
        }
        if bytes.len() < eval_len {
            return Err(Error::TooShort {
                needed: eval_len,
                have: bytes.len(),
            });
        }
        let windows: Vec<Vec<u8>> = bytes.chunks_exact(eval_len).map(<[u8]>::to_vec).collect();
        Ok(TextWindows {
            eval_len,
            k,
            dropped: bytes.len() % eval_len,
            windows,
        })
    }

    /// True on the last `k` of `eval_len` positions.
    pub fn loss_mask(&self) -> Vec<bool> {
        (0..self.eval_len).map(|i| i >= self.eval_len - self.k).collect()
    }

    pub fn scored_tokens(&self) -> usize {
        self.k * self.windows.len()
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn ingest_text(path: &Path, eval_len: usize, k: usize) -> Result<TextWindows> {
    TextWindows::from_bytes(&read_bytes(path)?, eval_len, k)
}
