//! Central finite-difference gradient checker (64-bit).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than `RELATIVE_FLOOR · max(1, |loss|)` are compared in
/// absolute terms; below that, central differences are dominated by rounding.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// An operation with analytic gradients w.r.t. every variable (inputs and
/// parameters alike).
pub trait GradTarget {
    fn forward(&mut self, vars: &[Tensor<f64>]) -> Result<Tensor<f64>>;

    /// Returns one gradient per variable, given the gradient of the output.
    fn backward(
        &mut self,
        vars: &[Tensor<f64>],
        grad_out: &Tensor<f64>,
    ) -> Result<Vec<Tensor<f64>>>;

    /// Rejects sample points where the op is not differentiable.
    fn admissible(&self, _var: usize, _value: f64) -> bool {
        true
    }
}

/// Draws variables of the given shapes from a seeded normal distribution
/// (re-drawing inadmissible points) and checks the target's gradients.
pub fn gradient_check(
    target: &mut dyn GradTarget,
    shapes: &[Vec<usize>],
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vars = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        let mut t = Tensor::<f64>::randn(shape, 1.0, &mut rng);
        for v in t.data_mut() {
            while !target.admissible(i, *v) {
                *v = Tensor::<f64>::randn(&[1], 1.0, &mut rng).data()[0];
            }
        }
        vars.push(t);
    }
    gradient_check_at(target, vars, seed)
}

/// Checks gradients at the given point. The scalar loss is a fixed random
/// projection `Σ rᵢ·yᵢ` of the output, so ops whose plain output sum is
/// constant (batch norm) still get a non-trivial check.
pub fn gradient_check_at(
    target: &mut dyn GradTarget,
    mut vars: Vec<Tensor<f64>>,
    seed: u64,
) -> Result<f64> {
    let out = target.forward(&vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let proj = Tensor::<f64>::randn(out.shape(), 1.0, &mut rng);
    let analytic = target.backward(&vars, &proj)?;
    if analytic.len() != vars.len() {
        return Err(Error::shape(format!(
            "{} gradients for {} variables",
            analytic.len(),
            vars.len()
        )));
    }
    let loss = |t: &mut dyn GradTarget, vars: &[Tensor<f64>]| -> Result<f64> {
        let y = t.forward(vars)?;
        Ok(y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };
    let floor = RELATIVE_FLOOR * loss(target, &vars)?.abs().max(1.0);
    let mut worst: f64 = 0.0;
    for vi in 0..vars.len() {
        analytic[vi].same_shape(&vars[vi])?;
        for k in 0..vars[vi].len() {
            let x0 = vars[vi].data()[k];
            let h = 1e-5 * x0.abs().max(1.0);
            vars[vi].data_mut()[k] = x0 + h;
            let up = loss(target, &vars)?;
            vars[vi].data_mut()[k] = x0 - h;
            let down = loss(target, &vars)?;
            vars[vi].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[vi].data()[k];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFiniteGradient(format!(
                    "variable {vi}, element {k}"
                )));
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Gradient targets for the individual layer ops.
pub mod targets {
    use super::*;
    use crate::nn::{
        batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, l2_normalize,
        l2_normalize_backward, prelu, prelu_backward, BatchNormState, ConvSpec, Mode, PReLUState,
    };

    /// Variables: `[input, weights]`.
    pub struct Conv(pub ConvSpec);

    impl GradTarget for Conv {
        fn forward(&mut self, vars: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            conv2d(&vars[0], &vars[1], &self.0)
        }
        fn backward(&mut self, vars: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            let (dx, dw) = conv2d_backward(&vars[0], &vars[1], &self.0, g)?;
            Ok(vec![dx, dw])
        }
    }

    /// Variables: `[input, scale, shift]`; the running statistics stay fixed.
    pub struct BatchNorm(pub BatchNormState<f64>);

    impl BatchNorm {
        pub fn new(channels: usize, mode: Mode) -> Self {
            let mut st = BatchNormState::new(channels);
            st.mode = mode;
            Self(st)
        }
    }

    impl GradTarget for BatchNorm {
        fn forward(&mut self, vars: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            self.0.scale = vars[1].clone();
            self.0.shift = vars[2].clone();
            Ok(batchnorm_forward(&vars[0], &self.0)?.0)
        }
        fn backward(&mut self, vars: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            self.0.scale = vars[1].clone();
            self.0.shift = vars[2].clone();
            let (_, cache) = batchnorm_forward(&vars[0], &self.0)?;
            let (dx, ds, db) = batchnorm_backward(&self.0, &cache, g)?;
            Ok(vec![dx, ds, db])
        }
    }

    /// Variables: `[input, slope]`. Inputs within 1e-3 of the kink are re-drawn.
    pub struct PRelu;

    impl GradTarget for PRelu {
        fn forward(&mut self, vars: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            prelu(
                &vars[0],
                &PReLUState {
                    slope: vars[1].clone(),
                },
            )
        }
        fn backward(&mut self, vars: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            let (dx, ds) = prelu_backward(
                &vars[0],
                &PReLUState {
                    slope: vars[1].clone(),
                },
                g,
            )?;
            Ok(vec![dx, ds])
        }
        fn admissible(&self, var: usize, value: f64) -> bool {
            var != 0 || value.abs() > 1e-3
        }
    }

    /// Variables: `[rows]`.
    pub struct L2Normalize;

    impl GradTarget for L2Normalize {
        fn forward(&mut self, vars: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            l2_normalize(&vars[0])
        }
        fn backward(&mut self, vars: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            Ok(vec![l2_normalize_backward(&vars[0], g)?])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Square;

    impl GradTarget for Square {
        fn forward(&mut self, vars: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            Ok(vars[0].map(|v| v * v))
        }
        fn backward(&mut self, vars: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            let mut d = vars[0].map(|v| 2.0 * v);
            d.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a *= b);
            Ok(vec![d])
        }
    }

    struct Wrong;

    impl GradTarget for Wrong {
        fn forward(&mut self, vars: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            Ok(vars[0].map(|v| v * v))
        }
        fn backward(&mut self, vars: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            let mut d = vars[0].map(|v| 3.0 * v);
            d.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a *= b);
            Ok(vec![d])
        }
    }

    #[test]
    fn accepts_correct_and_flags_wrong_gradients() {
        assert!(gradient_check(&mut Square, &[vec![3, 4]], 1).unwrap() < 1e-8);
        assert!(gradient_check(&mut Wrong, &[vec![3, 4]], 1).unwrap() > 0.1);
    }
}
