use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "optim.momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "optim.weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor, created on first use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Velocity<T: Real = f32> {
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Real> Velocity<T> {
    pub fn new() -> Self {
        Self {
            buffers: Vec::new(),
        }
    }

    pub fn is_initialized(&self) -> bool {
        !self.buffers.is_empty()
    }

    fn ensure(&mut self, params: &[&mut Tensor<T>]) -> Result<()> {
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.buffers.len() != params.len() {
            return Err(Error::shape(format!(
                "{} velocity buffers for {} parameters",
                self.buffers.len(),
                params.len()
            )));
        }
        for (v, p) in self.buffers.iter().zip(params) {
            v.same_shape(p)?;
        }
        Ok(())
    }
}

pub(crate) fn check_grads<T: Real>(params: &[&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.same_shape(g)?;
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(format!("parameter {i}")));
        }
    }
    Ok(())
}

/// `g' = g + wd·w;  v ← μ·v + g';  w ← w − lr·v`.
pub fn sgd_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut Velocity<T>,
    lr: f64,
    cfg: &SgdConfig,
) -> Result<()> {
    check_grads(params, grads)?;
    velocity.ensure(params)?;
    let lr = T::from_f64_lossy(lr);
    let mu = T::from_f64_lossy(cfg.momentum);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut velocity.buffers) {
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let gd = gi + wd * *w;
            *vi = mu * *vi + gd;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::full(&[1], v)
    }

    #[test]
    fn vanilla_step() {
        let mut w = scalar(1.0);
        let mut vel = Velocity::new();
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut [&mut w], &[scalar(1.0)], &mut vel, 0.1, &cfg).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut w = scalar(1.0);
        let mut vel = Velocity::new();
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut [&mut w], &[scalar(1.0)], &mut vel, 0.1, &cfg).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-15);
        sgd_step(&mut [&mut w], &[scalar(1.0)], &mut vel, 0.1, &cfg).unwrap();
        assert!((vel.buffers[0].data()[0] - 1.9).abs() < 1e-15);
        assert!((w.data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut w = Tensor::new(vec![3], vec![0.3f32, -1.7, 2.5]).unwrap();
        let before = w.clone();
        let mut vel = Velocity::new();
        let g = Tensor::new(vec![3], vec![1.0f32, 2.0, -3.0]).unwrap();
        sgd_step(&mut [&mut w], &[g], &mut vel, 0.0, &SgdConfig::default()).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut w = scalar(1.0);
        let mut vel = Velocity::new();
        let cfg = SgdConfig::default();
        assert!(matches!(
            sgd_step(&mut [&mut w], &[scalar(f64::NAN)], &mut vel, 0.1, &cfg),
            Err(Error::NonFiniteGradient(_))
        ));
        assert!(matches!(
            sgd_step(&mut [&mut w], &[Tensor::zeros(&[2])], &mut vel, 0.1, &cfg),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
