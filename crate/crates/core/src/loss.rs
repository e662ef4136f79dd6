//! Additive angular margin (ArcFace-style) classification loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normalize_row_backward, row_norm, GradTarget};
use crate::tensor::{Real, Tensor};

/// Cosines are clamped to `[-1 + COS_CLAMP, 1 - COS_CLAMP]` before `acos`.
pub const COS_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            scale: 64.0,
            margin: 0.5,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "loss.scale must be positive, got {}",
                self.scale
            )));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::InvalidConfig(format!(
                "loss.margin must lie in [0, pi/2), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Learnable class centres; rows are normalized on the fly, never in place.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T: Real = f32> {
    pub class_weights: Tensor<T>,
}

impl<T: Real> ClassifierHead<T> {
    pub fn new(num_classes: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            class_weights: Tensor::randn(&[num_classes, dim], 0.01, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<T: Real> {
    pub loss: T,
    pub grad_embeddings: Tensor<T>,
    pub grad_weights: Tensor<T>,
}

struct Normalized<T> {
    unit: Vec<T>,
    norms: Vec<T>,
}

fn normalize_rows<T: Real>(data: &[T], dim: usize) -> Result<Normalized<T>> {
    let mut unit = data.to_vec();
    let mut norms = Vec::with_capacity(data.len() / dim);
    for (i, row) in unit.chunks_mut(dim).enumerate() {
        let n = row_norm(row, i)?;
        let inv = T::one() / n;
        row.iter_mut().for_each(|v| *v *= inv);
        norms.push(n);
    }
    Ok(Normalized { unit, norms })
}

/// Target-logit transform: `cos(θ + m)` while `θ ≤ π − m`, else `cos θ − m·sin m`.
/// Returns the transformed cosine and its derivative w.r.t. `cos θ`.
fn margin_target(cos: f64, m: f64) -> (f64, f64) {
    let lo = -1.0 + COS_CLAMP;
    let hi = 1.0 - COS_CLAMP;
    let clamped = cos.clamp(lo, hi);
    let theta = clamped.acos();
    if theta <= std::f64::consts::PI - m {
        let value = (theta + m).cos();
        let slope = if cos < lo || cos > hi {
            0.0
        } else {
            (theta + m).sin() / theta.sin()
        };
        (value, slope)
    } else {
        (cos - m * m.sin(), 1.0)
    }
}

/// Mean cross-entropy over the batch of margin-adjusted, scaled cosine
/// logits, with gradients w.r.t. the raw embeddings and raw class weights.
pub fn arcface_loss<T: Real>(
    embeddings: &Tensor<T>,
    head: &ClassifierHead<T>,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<LossOutput<T>> {
    cfg.validate()?;
    let (n, d) = embeddings.dims2()?;
    let (classes, wd) = head.class_weights.dims2()?;
    if wd != d {
        return Err(Error::shape(format!(
            "embeddings are {d}-d, class weights {wd}-d"
        )));
    }
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} embeddings",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: classes,
        });
    }
    let e = normalize_rows(embeddings.data(), d)?;
    let w = normalize_rows(head.class_weights.data(), d)?;

    let mut cos = vec![T::zero(); n * classes];
    T::gemm(
        n,
        d,
        classes,
        T::one(),
        &e.unit,
        d as isize,
        1,
        &w.unit,
        1,
        d as isize,
        T::zero(),
        &mut cos,
        classes as isize,
        1,
    );

    let s = cfg.scale;
    let mut total = 0.0f64;
    // dL/dcos
    let mut g_cos = vec![T::zero(); n * classes];
    for (row, &y) in labels.iter().enumerate() {
        let c = &cos[row * classes..(row + 1) * classes];
        let (target, slope) = margin_target(c[y].as_f64(), cfg.margin);
        let logits: Vec<f64> = c
            .iter()
            .enumerate()
            .map(|(j, v)| s * if j == y { target } else { v.as_f64() })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - logits[y];
        for (j, z) in logits.iter().enumerate() {
            let p = (z - log_z).exp();
            let gz = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
            let gc = s * gz * if j == y { slope } else { 1.0 };
            g_cos[row * classes + j] = T::from_f64_lossy(gc);
        }
    }

    // dL/dê = G·ŵ, dL/dŵ = Gᵀ·ê
    let mut g_e = vec![T::zero(); n * d];
    T::gemm(
        n,
        classes,
        d,
        T::one(),
        &g_cos,
        classes as isize,
        1,
        &w.unit,
        d as isize,
        1,
        T::zero(),
        &mut g_e,
        d as isize,
        1,
    );
    let mut g_w = vec![T::zero(); classes * d];
    T::gemm(
        classes,
        n,
        d,
        T::one(),
        &g_cos,
        1,
        classes as isize,
        &e.unit,
        d as isize,
        1,
        T::zero(),
        &mut g_w,
        d as isize,
        1,
    );

    let mut grad_e = vec![T::zero(); n * d];
    for (i, ((x, g), o)) in embeddings
        .data()
        .chunks(d)
        .zip(g_e.chunks(d))
        .zip(grad_e.chunks_mut(d))
        .enumerate()
    {
        normalize_row_backward(x, e.norms[i], g, o);
    }
    let mut grad_w = vec![T::zero(); classes * d];
    for (i, ((x, g), o)) in head
        .class_weights
        .data()
        .chunks(d)
        .zip(g_w.chunks(d))
        .zip(grad_w.chunks_mut(d))
        .enumerate()
    {
        normalize_row_backward(x, w.norms[i], g, o);
    }

    Ok(LossOutput {
        loss: T::from_f64_lossy(total / n as f64),
        grad_embeddings: Tensor::new(vec![n, d], grad_e)?,
        grad_weights: Tensor::new(vec![classes, d], grad_w)?,
    })
}

/// Gradient-check target; variables are `[embeddings, class_weights]`.
pub struct ArcFaceCheck {
    pub labels: Vec<usize>,
    pub cfg: MarginConfig,
}

impl GradTarget for ArcFaceCheck {
    fn forward(&mut self, vars: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let head = ClassifierHead {
            class_weights: vars[1].clone(),
        };
        let out = arcface_loss(&vars[0], &head, &self.labels, &self.cfg)?;
        Tensor::new(vec![1], vec![out.loss])
    }

    fn backward(&mut self, vars: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let head = ClassifierHead {
            class_weights: vars[1].clone(),
        };
        let out = arcface_loss(&vars[0], &head, &self.labels, &self.cfg)?;
        let k = g.data()[0];
        let mut ge = out.grad_embeddings;
        let mut gw = out.grad_weights;
        ge.scale(k);
        gw.scale(k);
        Ok(vec![ge, gw])
    }
}
