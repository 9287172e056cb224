use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, Phase, Session};
use crate::tasks::{lm_example, TextWindows};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perplexity {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub scored_tokens: usize,
    pub windows: usize,
}

/// Summed NLL and scored-token count over equal-length windows, `batch`
/// windows per forward pass. `mask` applies to every window.
fn score(model: &Model, windows: &[&[u8]], mask: &[bool], batch: usize) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let per_window = mask.iter().filter(|&&m| m).count();
    let (mut total, mut count) = (0.0, 0);
    for group in windows.chunks(batch.max(1)) {
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        for w in group {
            let (x, y) = lm_example(w);
            tokens.extend(x);
            targets.extend(y);
        }
        let tiled: Vec<bool> = mask.iter().copied().cycle().take(targets.len()).collect();
        let mut s = Session::new();
        let logits = model.logits(&mut s, &tokens, group.len(), Phase::Eval, &mut rng)?;
        let loss = s.tape.cross_entropy(logits, &targets, &tiled)?;
        let n = per_window * group.len();
        total += s.tape.value(loss).item() * n as f64;
        count += n;
    }
    Ok((total, count))
}

fn finish(total: f64, count: usize, windows: usize) -> Perplexity {
    let mean_nll = total / count as f64;
    Perplexity {
        perplexity: mean_nll.exp(),
        mean_nll,
        scored_tokens: count,
        windows,
    }
}

/// Each window is processed in full; only its final `k` tokens are scored.
pub fn last_k_perplexity(model: &Model, windows: &TextWindows, batch: usize) -> Result<Perplexity> {
    if windows.windows.is_empty() {
        return Err(Error::contract("no windows to score"));
    }
    let refs: Vec<&[u8]> = windows.windows.iter().map(Vec::as_slice).collect();
    let (total, count) = score(model, &refs, &windows.loss_mask(), batch)?;
    Ok(finish(total, count, refs.len()))
}

/// Splits `bytes` into consecutive segments of `seg_len` (the last one may
/// be shorter) and scores every token of every segment.
pub fn non_overlapping_perplexity(model: &Model, bytes: &[u8], seg_len: usize, batch: usize) -> Result<Perplexity> {
    if bytes.is_empty() || seg_len == 0 {
        return Err(Error::contract("need non-empty text and a positive segment length"));
    }
    let full: Vec<&[u8]> = bytes.chunks_exact(seg_len).collect();
    let tail = bytes.chunks_exact(seg_len).remainder();
    let (mut total, mut count) = (0.0, 0);
    if !full.is_empty() {
        let (t, c) = score(model, &full, &vec![true; seg_len], batch)?;
        total += t;
        count += c;
    }
    if !tail.is_empty() {
        let (t, c) = score(model, &[tail], &vec![true; tail.len()], 1)?;
        total += t;
        count += c;
    }
    Ok(finish(total, count, full.len() + usize::from(!tail.is_empty())))
}
