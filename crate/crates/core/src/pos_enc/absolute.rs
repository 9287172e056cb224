use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed sinusoidal table `[n, d]`: column `2i` holds
/// `sin(pos / 10000^(2i/d))` and column `2i + 1` the matching cosine.
pub fn sinusoidal_ape(n: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::config(format!("sinusoidal encoding width {d} must be even")));
    }
    let mut out = Tensor::zeros(&[n, d]);
    let data = out.data_mut();
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Ok(out)
}

/// Learned absolute table `[max_len, d]`, initialized like token embeddings.
pub fn learned_ape_init<R: Rng>(max_len: usize, d: usize, rng: &mut R) -> Tensor {
    Tensor::normal(&[max_len, d], 0.02, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_alternates_zero_one() {
        let t = sinusoidal_ape(3, 8).unwrap();
        for c in 0..8 {
            assert_eq!(t.data()[c], if c % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn position_one_first_pair() {
        let t = sinusoidal_ape(2, 4).unwrap();
        assert!((t.data()[4] - 0.8414709848078965).abs() < 1e-12);
        assert!((t.data()[5] - 0.5403023058681398).abs() < 1e-12);
    }

    #[test]
    fn entries_bounded() {
        let t = sinusoidal_ape(200, 16).unwrap();
        assert!(t.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn odd_width_rejected() {
        assert!(matches!(sinusoidal_ape(4, 5), Err(Error::Config(_))));
    }
}
