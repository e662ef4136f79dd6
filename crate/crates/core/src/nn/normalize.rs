use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MIN_NORM: f64 = 1e-12;

/// Scales each row of an `(N, D)` tensor to unit Euclidean norm.
pub fn l2_normalize<T: Real>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = v.dims2()?;
    let mut out = v.data().to_vec();
    for (row, chunk) in out.chunks_mut(d).enumerate().take(n) {
        let norm = row_norm(chunk, row)?;
        let inv = T::one() / norm;
        chunk.iter_mut().for_each(|x| *x *= inv);
    }
    Tensor::new(v.shape().to_vec(), out)
}

pub(crate) fn row_norm<T: Real>(row: &[T], index: usize) -> Result<T> {
    let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm.as_f64().is_nan() || norm.as_f64() <= MIN_NORM {
        return Err(Error::ZeroVector {
            row: index,
            norm: norm.as_f64(),
        });
    }
    Ok(norm)
}

/// Vector-Jacobian product of `x ↦ x/‖x‖` for one row.
pub(crate) fn normalize_row_backward<T: Real>(x: &[T], norm: T, grad: &[T], out: &mut [T]) {
    let inv = T::one() / norm;
    let dot: T = x.iter().zip(grad).map(|(&a, &g)| a * inv * g).sum();
    for ((o, &a), &g) in out.iter_mut().zip(x).zip(grad) {
        *o = (g - dot * a * inv) * inv;
    }
}

pub fn l2_normalize_backward<T: Real>(v: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    v.same_shape(grad_out)?;
    let (_, d) = v.dims2()?;
    let mut dx = vec![T::zero(); v.len()];
    for (row, ((x, g), o)) in v
        .data()
        .chunks(d)
        .zip(grad_out.data().chunks(d))
        .zip(dx.chunks_mut(d))
        .enumerate()
    {
        let norm = row_norm(x, row)?;
        normalize_row_backward(x, norm, g, o);
    }
    Tensor::new(v.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let v = Tensor::new(vec![1, 2], vec![3.0f64, 4.0]).unwrap();
        let u = l2_normalize(&v).unwrap();
        assert!((u.data()[0] - 0.6).abs() < 1e-15 && (u.data()[1] - 0.8).abs() < 1e-15);
        let unit = Tensor::new(vec![1, 2], vec![0.0f64, 1.0]).unwrap();
        assert_eq!(l2_normalize(&unit).unwrap(), unit);
    }

    #[test]
    fn zero_row_rejected() {
        let v = Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            l2_normalize(&v),
            Err(Error::ZeroVector { row: 1, .. })
        ));
    }
}
