use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Rotates each channel pair of `x` (`[n, d]`) by `positions[t]·theta_base^(-2i/d)`.
pub fn rope_rotate(x: &Tensor, positions: &[usize], theta_base: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let r = tape.rope(v, positions, theta_base)?;
    Ok(tape.value(r).clone())
}

/// `n` distinct positions drawn uniformly from `[0, pool)`, ascending.
pub fn sample_randomized_positions<R: Rng>(n: usize, pool: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n > pool {
        return Err(Error::config(format!(
            "cannot draw {n} distinct positions from a pool of {pool}"
        )));
    }
    let mut pos = index::sample(rng, pool, n).into_vec();
    pos.sort_unstable();
    Ok(pos)
}
