use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel affine batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Real = f32> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: Mode,
}

/// What the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T: Real> {
    mode: Mode,
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::full(&[channels], T::one()),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// `running ← momentum·running + (1 − momentum)·batch` from a train-mode pass.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = T::from_f64_lossy(self.momentum);
        let one_m = T::one() - m;
        for (r, &b) in self
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(&cache.batch_mean)
        {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&cache.batch_var) {
            *r = (m * *r + one_m * b).max(T::zero());
        }
    }
}

fn layout<T: Real>(input: &Tensor<T>, channels: usize) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    if c != channels {
        return Err(Error::shape(format!(
            "batch norm over {channels} channels got {c}"
        )));
    }
    Ok((n, c, h * w))
}

/// Normalizes `input` without touching running statistics.
pub fn batchnorm_forward<T: Real>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
) -> Result<(Tensor<T>, BnCache<T>)> {
    batchnorm_forward_with(input, state, state.mode)
}

/// [`batchnorm_forward`] with the mode given explicitly instead of read from `state`.
pub fn batchnorm_forward_with<T: Real>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, hw) = layout(input, state.channels())?;
    let eps = T::from_f64_lossy(state.eps);
    let x = input.data();
    let (mean, var) = match mode {
        Mode::Train => {
            let count = n * hw;
            if count < 2 {
                return Err(Error::DegenerateBatch);
            }
            let inv_count = T::one() / T::from_usize(count).unwrap();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += x[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                }
                let mu = s * inv_count;
                let mut sq = T::zero();
                for b in 0..n {
                    for &v in &x[(b * c + ch) * hw..][..hw] {
                        let d = v - mu;
                        sq += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq * inv_count;
            }
            (mean, var)
        }
        Mode::Infer => (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
        ),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let (scale, shift) = (state.scale.data(), state.shift.data());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                normalized[i] = xh;
                out[i] = scale[ch] * xh + shift[ch];
            }
        }
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        BnCache {
            mode,
            normalized: Tensor::new(shape, normalized)?,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Forward pass; in train mode also folds the batch statistics into the running ones.
pub fn batchnorm<T: Real>(input: &Tensor<T>, state: &mut BatchNormState<T>) -> Result<Tensor<T>> {
    let (out, cache) = batchnorm_forward(input, state)?;
    state.update_running(&cache);
    Ok(out)
}

/// Returns `(d_input, d_scale, d_shift)`.
pub fn batchnorm_backward<T: Real>(
    state: &BatchNormState<T>,
    cache: &BnCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    grad_out.same_shape(&cache.normalized)?;
    let (n, c, hw) = layout(grad_out, state.channels())?;
    let dy = grad_out.data();
    let xh = cache.normalized.data();
    let scale = state.scale.data();
    let mut d_scale = vec![T::zero(); c];
    let mut d_shift = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                d_shift[ch] += dy[i];
                d_scale[ch] += dy[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    match cache.mode {
        Mode::Train => {
            let m = T::from_usize(n * hw).unwrap();
            for ch in 0..c {
                let k = scale[ch] * cache.inv_std[ch] / m;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        dx[i] = k * (m * dy[i] - d_shift[ch] - xh[i] * d_scale[ch]);
                    }
                }
            }
        }
        Mode::Infer => {
            for b in 0..n {
                for ch in 0..c {
                    let k = scale[ch] * cache.inv_std[ch];
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        dx[i] = k * dy[i];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        Tensor::new(vec![c], d_scale)?,
        Tensor::new(vec![c], d_shift)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_value_batch_closed_form() {
        let mut st = BatchNormState::<f64>::new(1);
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = batchnorm(&x, &mut st).unwrap();
        // (x - 2) / sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
        assert!((expect - 0.999_995_0).abs() < 1e-7);
        // running stats: 0.9·0 + 0.1·2 and 0.9·1 + 0.1·1
        assert!((st.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((st.running_var.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standardized_input_passes_through() {
        let mut st = BatchNormState::<f64>::new(1);
        st.eps = 0.0;
        let x = Tensor::new(vec![4, 1, 1, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let y = batchnorm(&x, &mut st).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn infer_mode_affine() {
        let mut st = BatchNormState::<f32>::new(1);
        st.mode = Mode::Infer;
        st.scale = Tensor::full(&[1], 2.0);
        st.shift = Tensor::full(&[1], 1.0);
        let x = Tensor::full(&[1, 1, 1, 1], 3.0f32);
        let y = batchnorm(&x, &mut st).unwrap();
        assert!((y.data()[0] - 6.99997).abs() < 1e-5);
        assert_eq!(st.running_mean.data(), &[0.0]);
    }

    #[test]
    fn single_element_batch_is_degenerate() {
        let mut st = BatchNormState::<f32>::new(2);
        let x = Tensor::zeros(&[1, 2, 1, 1]);
        assert!(matches!(
            batchnorm(&x, &mut st),
            Err(Error::DegenerateBatch)
        ));
        let x = Tensor::zeros(&[1, 3, 1, 1]);
        assert!(matches!(
            batchnorm(&x, &mut st),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut st = BatchNormState::<f64>::new(3);
        let x = Tensor::<f64>::randn(&[4, 3, 5, 5], 3.0, &mut rng).map(|v| v + 7.0);
        let y = batchnorm(&x, &mut st).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + ch) * 25..][..25].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(st.running_var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn infer_mode_ignores_batch_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut st = BatchNormState::<f64>::new(2);
        st.mode = Mode::Infer;
        st.running_mean = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let x = Tensor::<f64>::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let full = batchnorm(&x, &mut st).unwrap();
        let first = batchnorm(&x.slice_outer(0, 1).unwrap(), &mut st).unwrap();
        assert_eq!(&full.data()[..8], first.data());
    }
}
