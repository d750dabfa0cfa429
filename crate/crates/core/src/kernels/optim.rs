use serde::{Deserialize, Serialize};

use super::ParamMut;
use crate::error::{Error, Result};
use crate::numeric::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment buffers are allocated on the first step.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. Parameters are untouched if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [ParamMut<'_, T>], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter buffers but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.values.len() != g.len() {
                return Err(Error::Shape(format!(
                    "parameter `{}` has {} values but its gradient has {}",
                    p.name,
                    p.values.len(),
                    g.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.values.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.values.len())
        {
            return Err(Error::Shape("parameter layout changed between Adam steps".into()));
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correction1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let correction2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (lr, eps) = (T::from_f64_lossy(c.lr), T::from_f64_lossy(c.eps));
        let one = T::one();

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                p.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1: theta = -lr / (1 + eps)
        let mut theta = [0.0f64];
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [ParamMut::new("theta", &mut theta)], &[&[1.0]]).unwrap();
        assert!((theta[0] - (-0.001 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((theta[0] + 0.000999999).abs() < 1e-9);

        let mut theta32 = [0.0f32];
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [ParamMut::new("theta", &mut theta32)], &[&[1.0]])
            .unwrap();
        assert!((theta32[0] + 0.000999999).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut theta = [0.5f32, -2.0];
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut [ParamMut::new("theta", &mut theta)], &[&[0.0, 0.0]])
                .unwrap();
        }
        assert_eq!(theta, [0.5, -2.0]);
        assert_eq!(adam.step_count(), 3);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut a = [1.0f32];
        let mut b = [2.0f32];
        let mut adam = AdamState::new(AdamConfig::default());
        let err = adam
            .step(
                &mut [ParamMut::new("a", &mut a), ParamMut::new("b", &mut b)],
                &[&[0.1], &[f32::NAN]],
            )
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "b"));
        assert_eq!((a[0], b[0]), (1.0, 2.0));
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut theta = [0.3f32, -0.7, 1.1];
            let mut adam = AdamState::new(AdamConfig::default());
            for k in 0..50 {
                let g: Vec<f32> = theta.iter().map(|&x| x * 2.0 + k as f32 * 0.01).collect();
                adam.step(&mut [ParamMut::new("theta", &mut theta)], &[&g]).unwrap();
            }
            theta.map(f32::to_bits)
        };
        assert_eq!(run(), run());
    }
}
