//! Bias-corrected Adam over a list of named parameter tensors.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("parameter {index}: gradient has {actual} values, parameter has {expected}")]
    ShapeMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("parameter {index} became non-finite after update (diverged)")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates per parameter plus the step counter.
pub struct AdamState {
    pub cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>], cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update. `grads[i]` pairs with `params[i]`; a `None` gradient
    /// leaves that parameter (and its moments) untouched.
    pub fn step(
        &mut self,
        params: &mut [Tensor<f32>],
        grads: &[Option<Vec<f32>>],
    ) -> Result<(), AdamError> {
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.len() != p.numel() {
                    return Err(AdamError::ShapeMismatch {
                        index,
                        expected: p.numel(),
                        actual: g.len(),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = self.cfg.lr;
        let eps = self.cfg.epsilon as f32;
        let (b1f, b2f) = (b1 as f32, b2 as f32);

        for (index, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[index];
            let v = &mut self.v[index];
            let data = p.data_mut();
            for i in 0..g.len() {
                let gi = g[i];
                m[i] = b1f * m[i] + (1.0 - b1f) * gi;
                v[i] = b2f * v[i] + (1.0 - b2f) * gi * gi;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                data[i] -= (lr * mhat) as f32 / ((vhat as f32).sqrt() + eps);
            }
            if let Some(i) = p.first_non_finite() {
                let _ = i;
                return Err(AdamError::NonFinite { index });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: Vec<f32>) -> Vec<Tensor<f32>> {
        vec![Tensor::from_vec(v).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = single(vec![0.5, -1.25, 3.0]);
        let before = params[0].clone();
        let mut state = AdamState::new(&params, AdamConfig::with_lr(0.1));
        state.step(&mut params, &[Some(vec![0.0; 3])]).unwrap();
        assert_eq!(params[0], before);
        // A missing gradient is also a no-op.
        state.step(&mut params, &[None]).unwrap();
        assert_eq!(params[0], before);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // Bias correction makes the very first update ~ -lr regardless of g scale.
        let mut params = single(vec![1.0]);
        let mut state = AdamState::new(&params, AdamConfig::with_lr(0.1));
        state.step(&mut params, &[Some(vec![1.0])]).unwrap();
        let delta = params[0].data()[0] - 1.0;
        assert!((delta + 0.1).abs() < 1e-6, "delta = {delta}");
    }

    #[test]
    fn two_steps_reduce_a_quadratic() {
        // f(x) = x^2, grad = 2x, start at 1.0
        let mut params = single(vec![1.0]);
        let mut state = AdamState::new(&params, AdamConfig::with_lr(0.1));
        let loss = |x: f32| x * x;
        let initial = loss(params[0].data()[0]);
        for _ in 0..2 {
            let g = 2.0 * params[0].data()[0];
            state.step(&mut params, &[Some(vec![g])]).unwrap();
        }
        assert!(loss(params[0].data()[0]) < initial);
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn mismatched_gradient_shape_is_rejected() {
        let mut params = single(vec![1.0, 2.0]);
        let mut state = AdamState::new(&params, AdamConfig::with_lr(0.1));
        let err = state.step(&mut params, &[Some(vec![1.0])]).unwrap_err();
        assert!(matches!(err, AdamError::ShapeMismatch { expected: 2, actual: 1, .. }));
    }
}
