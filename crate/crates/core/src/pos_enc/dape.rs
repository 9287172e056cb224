use rand::Rng;

use super::{BiasMatrix, DapeConfig, DapeVariant};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Weights of the per-entry correction MLP `in_ch → hidden → h`.
#[derive(Debug, Clone, PartialEq)]
pub struct DapeParams {
    /// `[in_ch, hidden]`
    pub w1: Tensor,
    /// `[hidden]`
    pub b1: Option<Tensor>,
    /// `[hidden, h]`
    pub w2: Tensor,
    /// `[h]`
    pub b2: Option<Tensor>,
    pub variant: DapeVariant,
    pub leaky_slope: f64,
}

/// Uniform `±1/√fan_in` weights and zero biases.
pub fn init_dape<R: Rng>(heads: usize, cfg: &DapeConfig, rng: &mut R) -> DapeParams {
    let in_ch = cfg.variant.input_channels(heads);
    let d = cfg.hidden;
    DapeParams {
        w1: Tensor::uniform(&[in_ch, d], 1.0 / (in_ch as f64).sqrt(), rng),
        b1: cfg.bias.then(|| Tensor::zeros(&[d])),
        w2: Tensor::uniform(&[d, heads], 1.0 / (d as f64).sqrt(), rng),
        b2: cfg.bias.then(|| Tensor::zeros(&[heads])),
        variant: cfg.variant,
        leaky_slope: cfg.leaky_slope,
    }
}

impl DapeParams {
    pub fn heads(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn input_channels(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn into_named(self) -> Vec<(&'static str, Tensor)> {
        let mut out = vec![("w1", self.w1)];
        out.extend(self.b1.map(|b| ("b1", b)));
        out.push(("w2", self.w2));
        out.extend(self.b2.map(|b| ("b2", b)));
        out
    }

    /// Evaluates on plain logits `a` (`[batch, h, n, n]`), returning the
    /// corrected logits and the correction term itself.
    pub fn apply(&self, a: &Tensor, bias: &BiasMatrix) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(bias.values.clone());
        let vars = DapeVars::constants(&mut tape, self);
        let (total, corr) = dape_apply_with_correction(&mut tape, av, bv, &vars, self.variant, self.leaky_slope)?;
        Ok((tape.value(total).clone(), tape.value(corr).clone()))
    }
}

/// DAPE parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DapeVars {
    pub w1: Var,
    pub b1: Option<Var>,
    pub w2: Var,
    pub b2: Option<Var>,
}

impl DapeVars {
    /// Resolves parameters by the names used in [`DapeParams::into_named`].
    pub fn bind(mut lookup: impl FnMut(&str) -> Result<Var>, bias: bool) -> Result<Self> {
        let w1 = lookup("w1")?;
        let b1 = if bias { Some(lookup("b1")?) } else { None };
        let w2 = lookup("w2")?;
        let b2 = if bias { Some(lookup("b2")?) } else { None };
        Ok(DapeVars { w1, b1, w2, b2 })
    }

    pub fn constants(tape: &mut Tape, p: &DapeParams) -> Self {
        DapeVars {
            w1: tape.constant(p.w1.clone()),
            b1: p.b1.as_ref().map(|b| tape.constant(b.clone())),
            w2: tape.constant(p.w2.clone()),
            b2: p.b2.as_ref().map(|b| tape.constant(b.clone())),
        }
    }
}

fn check_heads(tape: &Tape, a: Var, bias: Var, p: &DapeVars, variant: DapeVariant) -> Result<(usize, usize, usize)> {
    let sa = tape.shape(a);
    let sb = tape.shape(bias);
    if sa.len() != 4 || sb.len() != 3 || sa[1..] != *sb {
        return Err(Error::config(format!("DAPE logits {sa:?} do not match bias {sb:?}")));
    }
    let (batch, h, n) = (sa[0], sa[1], sa[2]);
    let w1 = tape.shape(p.w1);
    let w2 = tape.shape(p.w2);
    if w1.len() != 2 || w1[0] != variant.input_channels(h) || w2.len() != 2 || w2[0] != w1[1] || w2[1] != h {
        return Err(Error::config(format!(
            "DAPE weights {w1:?}/{w2:?} do not fit {h} heads with variant {}",
            variant.name()
        )));
    }
    Ok((batch, h, n))
}

/// Corrected logits together with the correction term `f`.
pub fn dape_apply_with_correction(
    tape: &mut Tape,
    a: Var,
    bias: Var,
    p: &DapeVars,
    variant: DapeVariant,
    slope: f64,
) -> Result<(Var, Var)> {
    check_heads(tape, a, bias, p, variant)?;
    match variant {
        DapeVariant::AddResidual => {
            let s = tape.add(a, bias)?;
            let f = tape.channel_mlp(s, None, p.w1, p.b1, p.w2, p.b2, slope)?;
            Ok((tape.add(s, f)?, f))
        }
        DapeVariant::Concate | DapeVariant::ConcateResidual => {
            let f = tape.channel_mlp(a, Some(bias), p.w1, p.b1, p.w2, p.b2, slope)?;
            let base = if variant == DapeVariant::Concate {
                a
            } else {
                tape.add(a, bias)?
            };
            Ok((tape.add(base, f)?, f))
        }
    }
}

/// Corrected logits for scaled attention logits `a` (`[batch, h, n, n]`)
/// and static bias `bias` (`[h, n, n]`):
///
/// * `AddResidual`: `A + B + f(A + B)`
/// * `Concate`: `A + f(A, B)`
/// * `ConcateResidual`: `A + B + f(A, B)`
///
/// The residual sum `A + B` is formed before `f` is added, so a network
/// that outputs exact zeros reproduces the static logits bit for bit.
pub fn dape_apply(
    tape: &mut Tape,
    a: Var,
    bias: Var,
    p: &DapeVars,
    variant: DapeVariant,
    slope: f64,
) -> Result<Var> {
    Ok(dape_apply_with_correction(tape, a, bias, p, variant, slope)?.0)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::alibi_bias;
    use super::*;

    fn cfg(variant: DapeVariant, hidden: usize) -> DapeConfig {
        DapeConfig {
            variant,
            hidden,
            ..DapeConfig::default()
        }
    }

    fn zeroed(mut p: DapeParams) -> DapeParams {
        p.w1.data_mut().fill(0.0);
        p.w2.data_mut().fill(0.0);
        p
    }

    fn leaky(x: f64, s: f64) -> f64 {
        if x >= 0.0 {
            x
        } else {
            s * x
        }
    }

    /// Per-entry scalar evaluation of the correction MLP.
    fn oracle_f(p: &DapeParams, v: &[f64]) -> Vec<f64> {
        let (d, h) = (p.hidden(), p.heads());
        let w1 = p.w1.data();
        let w2 = p.w2.data();
        let hid: Vec<f64> = (0..d)
            .map(|q| {
                let mut z = p.b1.as_ref().map_or(0.0, |b| b.data()[q]);
                for (c, x) in v.iter().enumerate() {
                    z += x * w1[c * d + q];
                }
                leaky(z, p.leaky_slope)
            })
            .collect();
        (0..h)
            .map(|k| {
                let mut u = p.b2.as_ref().map_or(0.0, |b| b.data()[k]);
                for (q, z) in hid.iter().enumerate() {
                    u += z * w2[q * h + k];
                }
                u
            })
            .collect()
    }

    #[test]
    fn zero_network_concate_residual_is_static_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = zeroed(init_dape(3, &cfg(DapeVariant::ConcateResidual, 8), &mut rng));
        let a = Tensor::uniform(&[2, 3, 5, 5], 2.0, &mut rng);
        let b = alibi_bias(5, &[0.5, 0.25, 0.125]).unwrap();
        let (total, corr) = p.apply(&a, &b).unwrap();
        assert!(corr.data().iter().all(|&x| x == 0.0));
        for (idx, &t) in total.data().iter().enumerate() {
            assert_eq!(t, a.data()[idx] + b.values.data()[idx % 75]);
        }
    }

    #[test]
    fn zero_network_concate_drops_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = zeroed(init_dape(2, &cfg(DapeVariant::Concate, 4), &mut rng));
        let a = Tensor::uniform(&[1, 2, 4, 4], 2.0, &mut rng);
        let b = alibi_bias(4, &[0.5, 0.25]).unwrap();
        assert_eq!(p.apply(&a, &b).unwrap().0.data(), a.data());
    }

    #[test]
    fn unit_network_matches_scalar_formula() {
        let p = DapeParams {
            w1: Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(),
            b1: Some(Tensor::zeros(&[1])),
            w2: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            b2: Some(Tensor::zeros(&[1])),
            variant: DapeVariant::ConcateResidual,
            leaky_slope: 0.01,
        };
        let a = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 0.0, 1.0, -3.0]).unwrap();
        let b = alibi_bias(2, &[1.0]).unwrap();
        let (total, _) = p.apply(&a, &b).unwrap();
        for i in 0..2 {
            for j in 0..=i {
                let s = a.data()[i * 2 + j] + b.get(0, i, j);
                let want = s + leaky(s, 0.01);
                assert_eq!(total.data()[i * 2 + j], want);
            }
        }
    }

    #[test]
    fn every_variant_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (batch, h, n) = (2, 3, 4);
        for variant in [DapeVariant::AddResidual, DapeVariant::Concate, DapeVariant::ConcateResidual] {
            let mut p = init_dape(h, &cfg(variant, 5), &mut rng);
            for b in [p.b1.as_mut().unwrap(), p.b2.as_mut().unwrap()] {
                b.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
            }
            let a = Tensor::uniform(&[batch, h, n, n], 2.0, &mut rng);
            let bias = alibi_bias(n, &[0.5, 0.3, 0.1]).unwrap();
            let (total, corr) = p.apply(&a, &bias).unwrap();
            let at = |bb: usize, k: usize, i: usize, j: usize| a.data()[((bb * h + k) * n + i) * n + j];
            for bb in 0..batch {
                for i in 0..n {
                    for j in 0..n {
                        let av: Vec<f64> = (0..h).map(|k| at(bb, k, i, j)).collect();
                        let bv: Vec<f64> = (0..h).map(|k| bias.get(k, i, j)).collect();
                        let input: Vec<f64> = match variant {
                            DapeVariant::AddResidual => av.iter().zip(&bv).map(|(x, y)| x + y).collect(),
                            _ => av.iter().chain(&bv).copied().collect(),
                        };
                        let f = oracle_f(&p, &input);
                        for k in 0..h {
                            let idx = ((bb * h + k) * n + i) * n + j;
                            let want = match variant {
                                DapeVariant::Concate => av[k] + f[k],
                                _ => av[k] + bv[k] + f[k],
                            };
                            assert!((corr.data()[idx] - f[k]).abs() < 1e-12);
                            assert!((total.data()[idx] - want).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn head_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_dape(2, &cfg(DapeVariant::ConcateResidual, 4), &mut rng);
        let a = Tensor::zeros(&[1, 3, 4, 4]);
        let b = alibi_bias(4, &[0.5, 0.25, 0.1]).unwrap();
        assert!(matches!(p.apply(&a, &b), Err(Error::Config(_))));
        let b2 = alibi_bias(4, &[0.5, 0.25]).unwrap();
        assert!(matches!(p.apply(&a, &b2), Err(Error::Config(_))));
    }

    #[test]
    fn init_shapes_and_determinism() {
        let c = cfg(DapeVariant::Concate, 32);
        let p = init_dape(12, &c, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(p.input_channels(), 24);
        assert_eq!(p.w2.shape(), &[32, 12]);
        let bound = 1.0 / 24f64.sqrt();
        assert!(p.w1.data().iter().all(|x| x.abs() <= bound));
        assert!(p.b1.as_ref().unwrap().data().iter().all(|&x| x == 0.0));
        assert_eq!(p, init_dape(12, &c, &mut ChaCha8Rng::seed_from_u64(4)));
        let add = init_dape(12, &cfg(DapeVariant::AddResidual, 32), &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(add.input_channels(), 12);
    }

    #[test]
    fn bias_free_network_has_two_tensors() {
        let c = DapeConfig {
            bias: false,
            ..DapeConfig::default()
        };
        let p = init_dape(4, &c, &mut ChaCha8Rng::seed_from_u64(0));
        let names: Vec<_> = p.into_named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["w1", "w2"]);
    }
}
