use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 6e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, cfg: &AdamConfig) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            lr: cfg.lr,
            eps: cfg.eps,
        }
    }
}

/// One bias-corrected Adam update per parameter; gradients are cleared after.
pub fn adam_step(params: &mut [&mut Tensor], states: &mut [AdamState]) -> Result<()> {
    if params.len() != states.len() {
        return Err(Error::contract(format!(
            "{} parameters but {} optimizer states",
            params.len(),
            states.len()
        )));
    }
    for (i, (p, s)) in params.iter().zip(states.iter()).enumerate() {
        if p.grad.is_none() {
            return Err(Error::contract(format!("parameter {i} has no gradient")));
        }
        if s.m.len() != p.numel() {
            return Err(Error::contract(format!("optimizer state {i} does not match its parameter")));
        }
    }
    for (p, s) in params.iter_mut().zip(states.iter_mut()) {
        let grad = p.grad.take().expect("checked above");
        s.step += 1;
        let t = s.step as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        for (((w, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(&mut s.m).zip(&mut s.v) {
            *m = s.beta1 * *m + (1.0 - s.beta1) * g;
            *v = s.beta2 * *v + (1.0 - s.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= s.lr * mhat / (vhat.sqrt() + s.eps);
        }
    }
    Ok(())
}

/// Global L2 norm of all gradients, rescaled to at most `max_norm` when given.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: Option<f64>) -> f64 {
    let norm = params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if let Some(max) = max_norm {
        if norm > max && norm.is_finite() {
            let s = max / norm;
            for g in params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut w = Tensor::from_vec(vec![1.0, -2.0, 3.5]).with_grad();
        w.grad = Some(vec![0.0; 3]);
        let mut st = vec![AdamState::new(3, &cfg(0.1))];
        adam_step(&mut [&mut w], &mut st).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0, 3.5]);
        assert!(w.grad.is_none());
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = lr / (1 + eps).
        let mut w = Tensor::scalar(0.0).with_grad();
        w.grad = Some(vec![1.0]);
        let mut st = vec![AdamState::new(1, &cfg(0.1))];
        adam_step(&mut [&mut w], &mut st).unwrap();
        assert!((w.item() + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!(st[0].v.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn converges_on_quadratic() {
        let mut w = Tensor::scalar(0.0).with_grad();
        let mut st = vec![AdamState::new(1, &cfg(0.3))];
        for _ in 0..100 {
            let x = w.item();
            w.grad = Some(vec![2.0 * (x - 3.0)]);
            adam_step(&mut [&mut w], &mut st).unwrap();
        }
        assert!((w.item() - 3.0).abs() < 0.1, "w = {}", w.item());
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut w = Tensor::scalar(0.0).with_grad();
        let mut st = vec![AdamState::new(1, &cfg(0.1))];
        assert!(matches!(adam_step(&mut [&mut w], &mut st), Err(Error::Contract(_))));
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut w = Tensor::from_vec(vec![0.0, 0.0]).with_grad();
        w.grad = Some(vec![3.0, 4.0]);
        let norm = clip_grad_norm(&mut [&mut w], Some(1.0));
        assert_eq!(norm, 5.0);
        let g = w.grad.as_ref().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
