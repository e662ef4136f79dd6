use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const PRELU_INIT_SLOPE: f64 = 0.25;

/// Per-channel learnable negative-region slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct PReLUState<T: Real = f32> {
    pub slope: Tensor<T>,
}

impl<T: Real> PReLUState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            slope: Tensor::full(&[channels], T::from_f64_lossy(PRELU_INIT_SLOPE)),
        }
    }
}

fn channel_plane<T: Real>(
    input: &Tensor<T>,
    state: &PReLUState<T>,
) -> Result<(usize, usize, usize)> {
    let shape = input.shape();
    if shape.len() < 2 || shape[1] != state.slope.len() {
        return Err(Error::shape(format!(
            "prelu with {} slopes applied to {shape:?}",
            state.slope.len()
        )));
    }
    let plane = shape[2..].iter().product();
    Ok((shape[0], shape[1], plane))
}

pub fn prelu<T: Real>(input: &Tensor<T>, state: &PReLUState<T>) -> Result<Tensor<T>> {
    let (n, c, plane) = channel_plane(input, state)?;
    let slope = state.slope.data();
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let v = x[i];
                out[i] = if v > T::zero() { v } else { slope[ch] * v };
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Returns `(d_input, d_slope)`.
pub fn prelu_backward<T: Real>(
    input: &Tensor<T>,
    state: &PReLUState<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    input.same_shape(grad_out)?;
    let (n, c, plane) = channel_plane(input, state)?;
    let slope = state.slope.data();
    let (x, dy) = (input.data(), grad_out.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut ds = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                if x[i] > T::zero() {
                    dx[i] = dy[i];
                } else {
                    dx[i] = slope[ch] * dy[i];
                    ds[ch] += x[i] * dy[i];
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(vec![c], ds)?,
    ))
}
