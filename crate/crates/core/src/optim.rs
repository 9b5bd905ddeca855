//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// DCGAN-style settings.
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && [self.lr, self.beta1, self.beta2, self.eps]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(TensorError::invalid(
                "adam",
                format!("invalid hyperparameters {self:?}"),
            ))
        }
    }
}

/// Moment accumulators for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every parameter in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        self.config.validate()?;
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::shape(
                "adam",
                self.m.len(),
                (params.len(), grads.len()),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::shape("adam", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let mut s = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..10 {
            s.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step, 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps)
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = vec![Tensor::scalar(3.0)];
        let mut s = AdamState::new(cfg, &p);
        s.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let expected = 3.0 - 0.1 / (1.0 + 1e-8);
        assert_eq!(p[0].item(), expected);
        assert!((3.0 - p[0].item() - 0.1).abs() < 1e-8);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(cfg, &p);
        for _ in 0..500 {
            let g = Tensor::scalar(2.0 * p[0].item());
            s.step(&mut p, &[g]).unwrap();
        }
        assert!(p[0].item().abs() < 1e-2, "w = {}", p[0].item());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(AdamConfig::default(), &p);
        assert!(s.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
        assert_eq!(s.step, 0);
    }

    #[test]
    fn non_positive_hyperparameters_rejected() {
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut p = vec![Tensor::zeros(&[1])];
        let mut s = AdamState::new(cfg, &p);
        assert!(s.step(&mut p, &[Tensor::zeros(&[1])]).is_err());
    }
}
