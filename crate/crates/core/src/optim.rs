//! Adaptive-moment optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam state for an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self {
            lr,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. A `None` gradient is treated as zero.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(shape_err(
                "adam_step",
                format!(
                    "{} params, {} gradients, state for {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if p.len() != m.len() {
                return Err(shape_err(
                    "adam_step",
                    format!("parameter {i} changed size"),
                ));
            }
            let Some(g) = g else {
                // Zero gradient still decays the moments.
                for j in 0..m.len() {
                    m[j] *= ADAM_BETA1;
                    v[j] *= ADAM_BETA2;
                    let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    p.data_mut()[j] -= update;
                }
                continue;
            };
            if g.len() != m.len() {
                return Err(shape_err(
                    "adam_step",
                    format!(
                        "gradient {i} has {} values, parameter has {}",
                        g.len(),
                        m.len()
                    ),
                ));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient {i}[{j}] in adam_step")));
            }
            let data = p.data_mut();
            for j in 0..m.len() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                data[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
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
        // m_hat = 1, v_hat = 1 at step 1, so the update is lr / (1 + eps).
        let mut p = vec![Tensor::scalar(0.0)];
        let mut opt = Adam::new(0.1, &p);
        opt.step(&mut p, &[Some(vec![1.0])]).unwrap();
        let expected = -0.1 / (1.0 + ADAM_EPS);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert!((p[0].data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut opt = Adam::new(1e-3, &p);
        for _ in 0..10 {
            opt.step(&mut p, &[Some(vec![0.0, 0.0])]).unwrap();
        }
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(opt.steps(), 10);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut p = vec![
            Tensor::vector(vec![0.3, 0.7]),
            Tensor::vector(vec![0.3, 0.7]),
        ];
        let mut opt = Adam::new(1e-2, &p);
        for k in 0..5 {
            let g = vec![0.1 * k as f64, -0.4];
            opt.step(&mut p, &[Some(g.clone()), Some(g)]).unwrap();
        }
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut opt = Adam::new(0.1, &p);
        assert!(opt.step(&mut p, &[Some(vec![f64::NAN])]).is_err());
    }
}
