use serde::{Deserialize, Serialize};

use super::sgd::check_grads;
use super::{sgd_step, Parameters, SgdConfig, Velocity};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub rho: f64,
    pub grad_norm_floor: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            rho: 0.02,
            grad_norm_floor: 1e-12,
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "optim.rho must be non-negative, got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

/// Which half of a SAM step a loss evaluation belongs to. Batch-norm running
/// statistics should only be committed during [`SamPass::Descent`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamPass {
    /// Gradient at the current weights, used to build the perturbation.
    Ascent,
    /// Gradient at the perturbed weights, used for the update.
    Descent,
}

/// `ε = ρ·g / max(‖g‖₂, floor)` with the global norm over all tensors.
pub fn sam_perturbation<T: Real>(grads: &[Tensor<T>], rho: f64, floor: f64) -> Vec<Tensor<T>> {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    let k = T::from_f64_lossy(rho / sq.sqrt().max(floor));
    grads
        .iter()
        .map(|g| {
            let mut e = g.clone();
            e.scale(k);
            e
        })
        .collect()
}

/// One sharpness-aware step.
///
/// `loss_grad` returns the loss and per-parameter gradients (in
/// [`Parameters::params`] order) at the model's current weights. It is called
/// once at `w` and once at `w + ε`; the weights are then restored to `w`
/// bit-for-bit and updated with [`sgd_step`] using the second gradient.
/// Weight decay enters the ascent direction the same way it enters the SGD
/// update. Returns the loss of the first pass.
pub fn sam_step<T, M, F>(
    model: &mut M,
    mut loss_grad: F,
    velocity: &mut Velocity<T>,
    lr: f64,
    sam: &SamConfig,
    base: &SgdConfig,
) -> Result<T>
where
    T: Real,
    M: Parameters<T>,
    F: FnMut(&mut M, SamPass) -> Result<(T, Vec<Tensor<T>>)>,
{
    let (loss, mut g1) = loss_grad(model, SamPass::Ascent)?;
    check_grads(&model.params_mut(), &g1)?;
    if base.weight_decay != 0.0 {
        let wd = T::from_f64_lossy(base.weight_decay);
        for (g, w) in g1.iter_mut().zip(model.params()) {
            for (gi, &wi) in g.data_mut().iter_mut().zip(w.data()) {
                *gi += wd * wi;
            }
        }
    }
    let eps = sam_perturbation(&g1, sam.rho, sam.grad_norm_floor);
    let perturbed = eps.iter().any(|e| e.data().iter().any(|v| *v != T::zero()));
    let saved: Vec<Tensor<T>> = if perturbed {
        model.params().into_iter().cloned().collect()
    } else {
        Vec::new()
    };
    if perturbed {
        for (w, e) in model.params_mut().into_iter().zip(&eps) {
            w.add_assign(e)?;
        }
    }
    let second = loss_grad(model, SamPass::Descent);
    if perturbed {
        for (w, s) in model.params_mut().into_iter().zip(saved) {
            *w = s;
        }
    }
    let (_, g2) = second?;
    sgd_step(&mut model.params_mut(), &g2, velocity, lr, base)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    // L(w) = ½‖w‖²
    #[allow(clippy::ptr_arg)]
    fn quadratic(w: &mut Vec<Tensor<f64>>, _: SamPass) -> Result<(f64, Vec<Tensor<f64>>)> {
        let loss = 0.5 * w.iter().map(|t| t.sq_norm()).sum::<f64>();
        Ok((loss, w.clone()))
    }

    #[test]
    fn quadratic_closed_form() {
        let mut w = vec![Tensor::full(&[1], 1.0f64)];
        let mut vel = Velocity::new();
        let base = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sam_step(
            &mut w,
            quadratic,
            &mut vel,
            0.1,
            &SamConfig::default(),
            &base,
        )
        .unwrap();
        assert!((w[0].data()[0] - 0.898).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_reduces_to_sgd() {
        let mut w = vec![Tensor::full(&[3], 0.5f64)];
        let mut vel = Velocity::new();
        let base = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let zero =
            |w: &mut Vec<Tensor<f64>>, _: SamPass| Ok((0.0, vec![Tensor::zeros(w[0].shape())]));
        sam_step(&mut w, zero, &mut vel, 0.1, &SamConfig::default(), &base).unwrap();
        assert_eq!(w[0].data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn perturbation_has_norm_rho() {
        let g = vec![
            Tensor::new(vec![2], vec![3.0f64, 0.0]).unwrap(),
            Tensor::new(vec![1], vec![4.0f64]).unwrap(),
        ];
        let e = sam_perturbation(&g, 0.02, 1e-12);
        let n: f64 = e.iter().map(|t| t.sq_norm()).sum::<f64>().sqrt();
        assert!((n - 0.02).abs() < 1e-15);
    }

    #[test]
    fn second_pass_sees_perturbed_weights_and_weights_are_restored() {
        let mut w = vec![Tensor::new(vec![2], vec![1.0f64, -2.0]).unwrap()];
        let before = w.clone();
        let mut seen = Vec::new();
        let mut vel = Velocity::new();
        let base = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sam_step(
            &mut w,
            |w: &mut Vec<Tensor<f64>>, pass| {
                seen.push((pass, w[0].clone()));
                quadratic(w, pass)
            },
            &mut vel,
            0.0,
            &SamConfig::default(),
            &base,
        )
        .unwrap();
        assert_eq!(w, before);
        assert_eq!(seen[0].0, SamPass::Ascent);
        assert_eq!(seen[1].0, SamPass::Descent);
        assert_ne!(seen[1].1, before[0]);
    }
}
