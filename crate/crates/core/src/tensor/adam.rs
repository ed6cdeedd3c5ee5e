use serde::{Deserialize, Serialize};

use super::array::Tensor;
use super::params::ParamSet;
use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// α = 1e-4, β₁ = 0, β₂ = 0.9, the WGAN-GP training defaults.
    pub const GAN: AdamConfig = AdamConfig { lr: 1e-4, beta1: 0.0, beta2: 0.9, eps: 1e-8 };
    /// α = 1e-3, β₁ = 0.9, β₂ = 0.999.
    pub const STANDARD: AdamConfig = AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::GAN
    }
}

/// First/second moment accumulators for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut AdamState) -> Result<(), TensorError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            detail: format!("{} params, {} grads", params.len(), grads.len()),
        });
    }
    for (p, g) in params.tensors().iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params.values_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    if params.tensors().iter().any(|t| !t.is_finite()) {
        return Err(TensorError::NumericalFault { op: "adam_step" });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(value)).unwrap();
        p
    }

    // m̂ = g, v̂ = g², so Δ = −α·g/(|g| + ε).
    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(0.0);
        let mut s = AdamState::new(&p, AdamConfig::GAN);
        adam_step(&mut p, &[Tensor::scalar(0.5)], &mut s).unwrap();
        let delta = p.tensors()[0].item();
        let expect = -1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((delta - expect).abs() < 1e-20, "{delta}");
        assert!((delta + 1e-4).abs() < 1e-11);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.25);
        let mut s = AdamState::new(&p, AdamConfig::STANDARD);
        for _ in 0..10 {
            adam_step(&mut p, &[Tensor::scalar(0.0)], &mut s).unwrap();
        }
        assert_eq!(p.tensors()[0].item(), 0.25);
        assert_eq!(s.step, 10);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut p = single(0.0);
            let mut s = AdamState::new(&p, AdamConfig::GAN);
            for g in [0.3, -0.1, 0.7] {
                adam_step(&mut p, &[Tensor::scalar(g)], &mut s).unwrap();
            }
            p.tensors()[0].item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_shape_checked() {
        let mut p = single(0.0);
        let mut s = AdamState::new(&p, AdamConfig::GAN);
        let bad = Tensor::zeros(&[2]);
        assert!(matches!(adam_step(&mut p, &[bad], &mut s), Err(TensorError::ShapeMismatch { .. })));
    }
}
