//! Finite-difference oracles shared by the integration tests.
#![allow(dead_code)]

pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so that vanishing gradients are
/// compared on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central difference of `f` with respect to `x[i]`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let fp = f(x);
    x[i] = orig - h;
    let fm = f(x);
    x[i] = orig;
    (fp - fm) / (2.0 * h)
}

/// Full numerical gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len()).map(|i| central_diff(&mut x, i, h, &mut f)).collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Deterministic values in [-2, 2].
pub fn uniform_vec(n: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

use dape_core::model::{Model, ModelConfig, Phase, Session};
use dape_core::pos_enc::PeConfig;

/// Two-layer, two-head, width-16 model over a 13-token vocabulary, with
/// a larger init so every path carries a visible gradient.
pub fn tiny_config(pe: PeConfig) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        vocab_size: 13,
        max_train_len: 6,
        pe,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

/// Loss of `model` on one batch. The rng is reseeded on every call so
/// that stochastic position sampling is identical across evaluations.
pub fn batch_loss(model: &Model, tokens: &[usize], targets: &[usize], batch: usize) -> (Session, dape_core::tensor::Var) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let mut s = Session::new();
    let logits = model.logits(&mut s, tokens, batch, Phase::Train, &mut rng).unwrap();
    let mask = vec![true; targets.len()];
    let loss = s.tape.cross_entropy(logits, targets, &mask).unwrap();
    (s, loss)
}

/// Largest relative error between tape and central-difference gradients
/// over every scalar parameter, with the name of the worst tensor.
pub fn model_grad_error(model: &mut Model, tokens: &[usize], targets: &[usize], batch: usize) -> (f64, String) {
    model.params.zero_grad();
    let (mut s, loss) = batch_loss(model, tokens, targets, batch);
    s.backward(loss, &mut model.params).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()])))
        .collect();
    let mut worst = (0.0, String::new());
    for (name, grad) in analytic {
        for i in 0..grad.len() {
            let orig = model.params.get(&name).unwrap().data()[i];
            let mut eval = |x: f64| {
                model.params.get_mut(&name).unwrap().data_mut()[i] = x;
                let (s, loss) = batch_loss(model, tokens, targets, batch);
                s.tape.value(loss).item()
            };
            let numeric = (eval(orig + FD_STEP) - eval(orig - FD_STEP)) / (2.0 * FD_STEP);
            model.params.get_mut(&name).unwrap().data_mut()[i] = orig;
            let e = rel_err(grad[i], numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]: tape {} vs numeric {numeric}", grad[i]));
            }
        }
    }
    worst
}
