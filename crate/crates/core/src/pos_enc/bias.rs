use rand::Rng;

use super::BiasMatrix;
use crate::error::{Error, Result};
use crate::tensor::{softplus_inverse, Tape, Tensor, Var};

/// Geometric slope schedule `2^(-8k/h)` for `k = 1..=h`.
pub fn default_alibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads).map(|k| 2f64.powf(-8.0 * k as f64 / heads as f64)).collect()
}

/// `-slopes[k]·|i-j|` per head.
pub fn alibi_bias(n: usize, slopes: &[f64]) -> Result<BiasMatrix> {
    if slopes.is_empty() {
        return Err(Error::config("alibi needs at least one slope"));
    }
    if let Some(bad) = slopes.iter().find(|&&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::config(format!("alibi slope {bad} must be positive")));
    }
    let h = slopes.len();
    let mut values = Tensor::zeros(&[h, n, n]);
    let data = values.data_mut();
    for (k, &r) in slopes.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                data[(k * n + i) * n + j] = -r * i.abs_diff(j) as f64;
            }
        }
    }
    Ok(BiasMatrix { values, causal_extent: n })
}

/// `-r1[k]·ln(1 + r2[k]·|i-j|)` per head; `r1` and `r2` must already be positive.
pub fn kerple_bias(tape: &mut Tape, r1: Var, r2: Var, n: usize) -> Result<Var> {
    tape.kerple_bias(r1, r2, n)
}

/// Bucket of the relative position `j - i`.
///
/// Half of the buckets (all of them when `bidirectional` is false) cover
/// distances exactly up to `num_buckets / 2`; the rest are spaced
/// logarithmically up to `max_distance`, and every longer distance shares
/// the last bucket. In the bidirectional layout keys to the right of the
/// query use the upper half of the bucket range.
pub fn t5_bucket(relative: i64, num_buckets: usize, max_distance: usize, bidirectional: bool) -> usize {
    let mut nb = num_buckets;
    let mut offset = 0;
    let dist = if bidirectional {
        nb /= 2;
        if relative > 0 {
            offset = nb;
        }
        relative.unsigned_abs() as usize
    } else {
        (-relative).max(0) as usize
    };
    let max_exact = nb / 2;
    if dist < max_exact {
        return offset + dist;
    }
    let scaled = (dist as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let bucket = max_exact + (scaled * (nb - max_exact) as f64) as usize;
    offset + bucket.min(nb - 1)
}

/// Looks up `table` (`[h, num_buckets]`) by bucketed relative position, as `[h, n, n]`.
pub fn t5_bucket_bias(
    tape: &mut Tape,
    table: Var,
    n: usize,
    num_buckets: usize,
    max_distance: usize,
    bidirectional: bool,
) -> Result<Var> {
    let shape = tape.shape(table).to_vec();
    if shape.len() != 2 || shape[1] != num_buckets {
        return Err(Error::Shape {
            op: "t5_bucket_bias",
            lhs: shape,
            rhs: vec![num_buckets],
        });
    }
    let h = shape[0];
    let idx: Vec<usize> = (0..n * n)
        .map(|e| {
            let (i, j) = (e / n, e % n);
            t5_bucket(j as i64 - i as i64, num_buckets, max_distance, bidirectional)
        })
        .collect();
    let by_bucket = tape.permute(table, &[1, 0])?;
    let rows = tape.gather_rows(by_bucket, &idx)?;
    let cube = tape.reshape(rows, &[n, n, h])?;
    tape.permute(cube, &[2, 0, 1])
}

/// Initial FIRE parameters: a `1 → hidden → h` ReLU network over the
/// normalized distance plus the raw (pre-softplus) log-transform scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FireParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub c_raw: Tensor,
}

impl FireParams {
    pub fn init<R: Rng>(heads: usize, hidden: usize, rng: &mut R) -> Self {
        FireParams {
            w1: Tensor::uniform(&[1, hidden], 1.0, rng),
            // Spread the ReLU kinks over the input range instead of all at zero.
            b1: Tensor::uniform(&[hidden], 1.0, rng),
            w2: Tensor::uniform(&[hidden, heads], 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[heads]),
            c_raw: Tensor::scalar(softplus_inverse(1.0)),
        }
    }

    pub fn into_named(self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("fire_w1", self.w1),
            ("fire_b1", self.b1),
            ("fire_w2", self.w2),
            ("fire_b2", self.b2),
            ("fire_c", self.c_raw),
        ]
    }
}

/// FIRE parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FireVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub c_raw: Var,
}

impl FireVars {
    /// Resolves each parameter through `lookup`, keyed by the names used in
    /// [`FireParams::into_named`].
    pub fn bind(mut lookup: impl FnMut(&str) -> Result<Var>) -> Result<Self> {
        Ok(FireVars {
            w1: lookup("fire_w1")?,
            b1: lookup("fire_b1")?,
            w2: lookup("fire_w2")?,
            b2: lookup("fire_b2")?,
            c_raw: lookup("fire_c")?,
        })
    }

    pub fn constants(tape: &mut Tape, p: &FireParams) -> Self {
        FireVars {
            w1: tape.constant(p.w1.clone()),
            b1: tape.constant(p.b1.clone()),
            w2: tape.constant(p.w2.clone()),
            b2: tape.constant(p.b2.clone()),
            c_raw: tape.constant(p.c_raw.clone()),
        }
    }
}

/// FIRE bias `f(ψ(|i-j|) / ψ(max(L, i)))` with `ψ(x) = ln(c·x + 1)`, as `[h, n, n]`.
pub fn fire_bias(tape: &mut Tape, p: &FireVars, n: usize, threshold: usize) -> Result<Var> {
    let c = tape.softplus(p.c_raw);
    let u = tape.fire_input(c, n, threshold)?;
    let z = tape.matmul(u, p.w1)?;
    let z = tape.add(z, p.b1)?;
    let z = tape.relu(z);
    let z = tape.matmul(z, p.w2)?;
    let z = tape.add(z, p.b2)?;
    let h = tape.shape(z)[1];
    let cube = tape.reshape(z, &[n, n, h])?;
    tape.permute(cube, &[2, 0, 1])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn alibi_examples() {
        let b = alibi_bias(6, &[0.5, 0.25]).unwrap();
        for k in 0..2 {
            for i in 0..6 {
                assert_eq!(b.get(k, i, i), 0.0);
            }
        }
        assert_eq!(b.get(0, 5, 1), -2.0);
        assert_eq!(b.get(1, 5, 1), -1.0);
    }

    #[test]
    fn alibi_rejects_nonpositive_slope() {
        assert!(matches!(alibi_bias(4, &[0.5, 0.0]), Err(Error::Config(_))));
        assert!(matches!(alibi_bias(4, &[-1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn default_slopes_for_eight_heads() {
        let s = default_alibi_slopes(8);
        assert_eq!(s[0], 0.5);
        assert_eq!(s[7], 0.00390625);
        for w in s.windows(2) {
            assert!((w[1] / w[0] - 0.5).abs() < 1e-15);
        }
    }

    fn kerple_at(r1: f64, r2: f64, n: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![r1]));
        let b = tape.constant(Tensor::from_vec(vec![r2]));
        let v = kerple_bias(&mut tape, a, b, n).unwrap();
        tape.data(v).to_vec()
    }

    #[test]
    fn kerple_examples() {
        let d = kerple_at(1.0, std::f64::consts::E - 1.0, 2);
        assert_eq!(d[0], 0.0);
        assert!((d[2] + 1.0).abs() < 1e-15);
        let d = kerple_at(2.0, 3.0, 3);
        assert!((d[2 * 3] + 3.8918202981106265).abs() < 1e-12);
    }

    #[test]
    fn distance_biases_strictly_decrease() {
        let alibi = alibi_bias(32, &[0.3]).unwrap();
        let kerple = kerple_at(0.7, 1.9, 32);
        let i = 31;
        for j in 1..=i {
            // Key j - 1 is one step further from query i than key j.
            assert!(alibi.get(0, i, j - 1) < alibi.get(0, i, j));
            assert!(kerple[i * 32 + j - 1] < kerple[i * 32 + j]);
        }
    }

    #[test]
    fn t5_causal_buckets() {
        assert_eq!(t5_bucket(0, 32, 128, false), 0);
        for d in 0..16 {
            assert_eq!(t5_bucket(-d, 32, 128, false), d as usize);
        }
        assert_eq!(t5_bucket(-128, 32, 128, false), 31);
        assert_eq!(t5_bucket(-5000, 32, 128, false), 31);
        // Future keys collapse to bucket 0 in the causal layout.
        assert_eq!(t5_bucket(7, 32, 128, false), 0);
        let mut last = 0;
        for d in 0..400 {
            let b = t5_bucket(-d, 32, 128, false);
            assert!(b >= last && b < 32);
            last = b;
        }
    }

    #[test]
    fn t5_bidirectional_splits_sides() {
        assert_eq!(t5_bucket(0, 32, 128, true), 0);
        assert_eq!(t5_bucket(-3, 32, 128, true), 3);
        assert_eq!(t5_bucket(3, 32, 128, true), 19);
        assert_eq!(t5_bucket(-1000, 32, 128, true), 15);
        assert_eq!(t5_bucket(1000, 32, 128, true), 31);
    }

    #[test]
    fn t5_bias_reads_table() {
        let mut tape = Tape::new();
        let table: Vec<f64> = (0..2 * 8).map(|x| x as f64).collect();
        let t = tape.constant(Tensor::new(vec![2, 8], table).unwrap());
        let v = t5_bucket_bias(&mut tape, t, 5, 8, 16, false).unwrap();
        assert_eq!(tape.shape(v), &[2, 5, 5]);
        let d = tape.data(v);
        for k in 0..2 {
            for i in 0..5 {
                for j in 0..=i {
                    let b = t5_bucket(j as i64 - i as i64, 8, 16, false);
                    assert_eq!(d[(k * 5 + i) * 5 + j], (k * 8 + b) as f64);
                }
            }
        }
    }

    fn fire_values(p: &FireParams, n: usize, threshold: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = FireVars::constants(&mut tape, p);
        let v = fire_bias(&mut tape, &vars, n, threshold).unwrap();
        tape.data(v).to_vec()
    }

    #[test]
    fn fire_diagonal_is_constant_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = FireParams::init(3, 8, &mut rng);
        let n = 10;
        let d = fire_values(&p, n, 4);
        for k in 0..3 {
            let first = d[k * n * n];
            for i in 0..n {
                assert_eq!(d[(k * n + i) * n + i], first);
            }
        }
    }

    #[test]
    fn fire_input_is_normalized() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1.7));
        for threshold in [1, 8, 64] {
            let u = tape.fire_input(c, 40, threshold).unwrap();
            let d = tape.data(u).to_vec();
            for i in 0..40 {
                for j in 0..=i {
                    let x = d[i * 40 + j];
                    assert!((0.0..=1.0).contains(&x), "u({i},{j}) = {x}");
                }
            }
        }
    }

    #[test]
    fn fire_identity_path_is_monotone() {
        // Single hidden unit with unit weights: the bias is the normalized
        // distance passed through ReLU, negated, which must not increase
        // as keys move away from the query.
        let p = FireParams {
            w1: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            b1: Tensor::zeros(&[1]),
            w2: Tensor::new(vec![1, 1], vec![-1.0]).unwrap(),
            b2: Tensor::zeros(&[1]),
            c_raw: Tensor::scalar(softplus_inverse(1.0)),
        };
        let (n, l) = (24, 8);
        let d = fire_values(&p, n, l);
        let psi = |x: f64| x.ln_1p();
        for i in 0..n {
            for j in 0..=i {
                let oracle = -psi((i - j) as f64) / psi(i.max(l) as f64);
                assert!((d[i * n + j] - oracle).abs() < 1e-12);
                if j > 0 {
                    assert!(d[i * n + j - 1] <= d[i * n + j]);
                }
            }
        }
    }

    #[test]
    fn static_biases_head_independent() {
        let base = alibi_bias(8, &[0.5, 0.25, 0.125]).unwrap();
        let moved = alibi_bias(8, &[0.5, 0.9, 0.125]).unwrap();
        for k in [0, 2] {
            for i in 0..8 {
                for j in 0..8 {
                    assert_eq!(base.get(k, i, j), moved.get(k, i, j));
                }
            }
        }
        let run = |r1: Vec<f64>| {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::from_vec(r1));
            let b = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
            let v = kerple_bias(&mut tape, a, b, 6).unwrap();
            tape.data(v).to_vec()
        };
        let (x, y) = (run(vec![1.0, 1.0, 1.0]), run(vec![1.0, 4.0, 1.0]));
        let slice = 36;
        assert_eq!(x[..slice], y[..slice]);
        assert_ne!(x[slice..2 * slice], y[slice..2 * slice]);
        assert_eq!(x[2 * slice..], y[2 * slice..]);
    }
}
