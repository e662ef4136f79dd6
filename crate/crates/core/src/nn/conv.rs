//! Grouped 2-D cross-correlation (no bias) and its gradients.
//!
//! Dense groups go through im2col + GEMM; depthwise layers
//! (`groups == in_channels == out_channels`) use direct loops. Work is split
//! per sample, and weight-gradient partials are summed in sample order, so the
//! result does not depend on how many threads ran.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding: (kernel - 1) / 2,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel, stride)
        }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.in_channels == 0 || self.out_channels == 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidSpec(format!("zero dimension in {self:?}")));
        }
        if self.stride == 0 || self.groups == 0 {
            return Err(Error::InvalidSpec(
                "stride and groups must be positive".into(),
            ));
        }
        if !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(Error::InvalidSpec(format!(
                "channels {}->{} not divisible by {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.has_bias {
            return Err(Error::InvalidSpec(
                "convolutions carry no bias; batch norm supplies the shift".into(),
            ));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return Err(Error::shape(format!(
                "{h}x{w} input (padding {}) smaller than {kh}x{kw} kernel",
                self.padding
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    /// Per-sample FLOPs at the given input size, counting a MAC as 2.
    pub fn flops(&self, h: usize, w: usize) -> Result<u64> {
        let (ho, wo) = self.output_hw(h, w)?;
        let (kh, kw) = self.kernel;
        Ok(2 * (kh * kw * (self.in_channels / self.groups) * self.out_channels * ho * wo) as u64)
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ho: usize,
    wo: usize,
}

fn check<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(usize, Geometry)> {
    spec.validate()?;
    let (n, cin, h, w) = input.dims4()?;
    if cin != spec.in_channels {
        return Err(Error::shape(format!(
            "input has {cin} channels, spec expects {}",
            spec.in_channels
        )));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "weights {:?}, spec expects {:?}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    Ok((
        n,
        Geometry {
            cin,
            h,
            w,
            cout: spec.out_channels,
            ho,
            wo,
        },
    ))
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == (1, 1) && spec.stride == 1 && spec.padding == 0
}

/// Unfolds channels `[c0, c0 + cpg)` of one sample into a `(cpg·kh·kw, ho·wo)` matrix.
fn im2col<T: Real>(x: &[T], g: &Geometry, spec: &ConvSpec, c0: usize, cpg: usize, cols: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (s, p) = (spec.stride, spec.padding);
    let plane = g.ho * g.wo;
    for ci in 0..cpg {
        let src = &x[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ci * kh + ki) * kw + kj) * plane..][..plane];
                for oh in 0..g.ho {
                    let dst = &mut row[oh * g.wo..(oh + 1) * g.wo];
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * s + kj) as isize - p as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into channels `[c0, c0 + cpg)` of `dx`.
fn col2im<T: Real>(cols: &[T], g: &Geometry, spec: &ConvSpec, c0: usize, cpg: usize, dx: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (s, p) = (spec.stride, spec.padding);
    let plane = g.ho * g.wo;
    for ci in 0..cpg {
        let dst = &mut dx[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((ci * kh + ki) * kw + kj) * plane..][..plane];
                for oh in 0..g.ho {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, &v) in row[oh * g.wo..(oh + 1) * g.wo].iter().enumerate() {
                        let iw = (ow * s + kj) as isize - p as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst_row[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Real>(x: &[T], wt: &[T], g: &Geometry, spec: &ConvSpec, out: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (s, p) = (spec.stride, spec.padding);
    for c in 0..g.cin {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let k = &wt[c * kh * kw..(c + 1) * kh * kw];
        let dst = &mut out[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let mut acc = T::zero();
                for ki in 0..kh {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src_row = &src[ih as usize * g.w..];
                    for kj in 0..kw {
                        let iw = (ow * s + kj) as isize - p as isize;
                        if iw >= 0 && iw < g.w as isize {
                            acc += k[ki * kw + kj] * src_row[iw as usize];
                        }
                    }
                }
                dst[oh * g.wo + ow] = acc;
            }
        }
    }
}

fn depthwise_backward<T: Real>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    g: &Geometry,
    spec: &ConvSpec,
    dx: &mut [T],
    dw: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let (s, p) = (spec.stride, spec.padding);
    for c in 0..g.cin {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let k = &wt[c * kh * kw..(c + 1) * kh * kw];
        let dk = &mut dw[c * kh * kw..(c + 1) * kh * kw];
        let dsrc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        let grad = &dy[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let go = grad[oh * g.wo + ow];
                for ki in 0..kh {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let iw = (ow * s + kj) as isize - p as isize;
                        if iw >= 0 && iw < g.w as isize {
                            let idx = ih as usize * g.w + iw as usize;
                            dk[ki * kw + kj] += src[idx] * go;
                            dsrc[idx] += k[ki * kw + kj] * go;
                        }
                    }
                }
            }
        }
    }
}

/// Grouped cross-correlation: `(N, Cin, H, W) * (Cout, Cin/g, kh, kw) -> (N, Cout, H', W')`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (n, g) = check(input, weights, spec)?;
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * g.ho * g.wo;
    let mut out = vec![T::zero(); n * out_sample];
    let x = input.data();
    let wt = weights.data();
    exec::for_each_chunk_mut(&mut out, out_sample, |b, dst| {
        let xs = &x[b * in_sample..(b + 1) * in_sample];
        if spec.is_depthwise() {
            depthwise_forward(xs, wt, &g, spec, dst);
            return;
        }
        let cpg = g.cin / spec.groups;
        let opg = g.cout / spec.groups;
        let k = cpg * spec.kernel.0 * spec.kernel.1;
        let plane = g.ho * g.wo;
        let mut cols = if is_pointwise(spec) {
            Vec::new()
        } else {
            vec![T::zero(); k * plane]
        };
        for grp in 0..spec.groups {
            let a = &wt[grp * opg * k..(grp + 1) * opg * k];
            let b_mat: &[T] = if is_pointwise(spec) {
                &xs[grp * cpg * plane..(grp + 1) * cpg * plane]
            } else {
                im2col(xs, &g, spec, grp * cpg, cpg, &mut cols);
                &cols
            };
            let c = &mut dst[grp * opg * plane..(grp + 1) * opg * plane];
            T::gemm(
                opg,
                k,
                plane,
                T::one(),
                a,
                k as isize,
                1,
                b_mat,
                plane as isize,
                1,
                T::zero(),
                c,
                plane as isize,
                1,
            );
        }
    });
    Tensor::new(vec![n, g.cout, g.ho, g.wo], out)
}

/// Gradients of a scalar loss w.r.t. the input and weights of [`conv2d`].
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, g) = check(input, weights, spec)?;
    if grad_out.shape() != [n, g.cout, g.ho, g.wo] {
        return Err(Error::shape(format!(
            "output gradient {:?}, expected {:?}",
            grad_out.shape(),
            [n, g.cout, g.ho, g.wo]
        )));
    }
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * g.ho * g.wo;
    let x = input.data();
    let wt = weights.data();
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); n * in_sample];
    let partials = exec::map_chunks_mut(&mut dx, in_sample, |b, dxs| {
        let xs = &x[b * in_sample..(b + 1) * in_sample];
        let dys = &dy[b * out_sample..(b + 1) * out_sample];
        let mut dw = vec![T::zero(); wt.len()];
        if spec.is_depthwise() {
            depthwise_backward(xs, wt, dys, &g, spec, dxs, &mut dw);
            return dw;
        }
        let cpg = g.cin / spec.groups;
        let opg = g.cout / spec.groups;
        let k = cpg * spec.kernel.0 * spec.kernel.1;
        let plane = g.ho * g.wo;
        let pointwise = is_pointwise(spec);
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); k * plane]
        };
        let mut dcols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); k * plane]
        };
        for grp in 0..spec.groups {
            let w_g = &wt[grp * opg * k..(grp + 1) * opg * k];
            let dy_g = &dys[grp * opg * plane..(grp + 1) * opg * plane];
            let cols_ref: &[T] = if pointwise {
                &xs[grp * cpg * plane..(grp + 1) * cpg * plane]
            } else {
                im2col(xs, &g, spec, grp * cpg, cpg, &mut cols);
                &cols
            };
            // dW_g = dY_g · colsᵀ
            T::gemm(
                opg,
                plane,
                k,
                T::one(),
                dy_g,
                plane as isize,
                1,
                cols_ref,
                1,
                plane as isize,
                T::zero(),
                &mut dw[grp * opg * k..(grp + 1) * opg * k],
                k as isize,
                1,
            );
            // dcols = W_gᵀ · dY_g
            let target: &mut [T] = if pointwise {
                &mut dxs[grp * cpg * plane..(grp + 1) * cpg * plane]
            } else {
                &mut dcols
            };
            T::gemm(
                k,
                opg,
                plane,
                T::one(),
                w_g,
                1,
                k as isize,
                dy_g,
                plane as isize,
                1,
                T::zero(),
                target,
                plane as isize,
                1,
            );
            if !pointwise {
                col2im(&dcols, &g, spec, grp * cpg, cpg, dxs);
            }
        }
        dw
    });
    let mut dw = vec![T::zero(); wt.len()];
    for p in &partials {
        for (acc, &v) in dw.iter_mut().zip(p) {
            *acc += v;
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(weights.shape().to_vec(), dw)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pointwise_scaling() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0f32]).unwrap();
        let y = conv2d(&x, &w, &ConvSpec::new(1, 1, 1, 1)).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn ones_kernel_sums() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let y = conv2d(&x, &w, &ConvSpec::new(1, 1, 3, 1).with_padding(0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn stem_output_shape() {
        let spec = ConvSpec::new(3, 64, 3, 2);
        assert_eq!(spec.output_hw(112, 112).unwrap(), (56, 56));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::randn(&[1, 3, 112, 112], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&spec.weight_shape(), 0.1, &mut rng);
        assert_eq!(conv2d(&x, &w, &spec).unwrap().shape(), &[1, 64, 56, 56]);
    }

    #[test]
    fn rejects_bad_specs_and_shapes() {
        let spec = ConvSpec::new(3, 4, 3, 1).with_groups(2);
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
        let mut biased = ConvSpec::new(2, 2, 1, 1);
        biased.has_bias = true;
        assert!(matches!(biased.validate(), Err(Error::InvalidSpec(_))));

        let spec = ConvSpec::new(2, 4, 3, 1);
        let x = Tensor::<f32>::zeros(&[1, 3, 5, 5]);
        let w = Tensor::<f32>::zeros(&spec.weight_shape());
        assert!(matches!(
            conv2d(&x, &w, &spec),
            Err(Error::ShapeMismatch(_))
        ));
        let x = Tensor::<f32>::zeros(&[1, 2, 5, 5]);
        let w_bad = Tensor::<f32>::zeros(&[4, 2, 1, 1]);
        assert!(matches!(
            conv2d(&x, &w_bad, &spec),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn depthwise_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::depthwise(3, 3, 2);
        let x = Tensor::<f64>::randn(&[2, 3, 7, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&spec.weight_shape(), 1.0, &mut rng);
        let y = conv2d(&x, &w, &spec).unwrap();
        let (ho, wo) = spec.output_hw(7, 6).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ih = (oh * 2 + ki) as isize - 1;
                                let iw = (ow * 2 + kj) as isize - 1;
                                if (0..7).contains(&ih) && (0..6).contains(&iw) {
                                    acc += w.data()[c * 9 + ki * 3 + kj]
                                        * x.data()
                                            [((b * 3 + c) * 7 + ih as usize) * 6 + iw as usize];
                                }
                            }
                        }
                        let got = y.data()[((b * 3 + c) * ho + oh) * wo + ow];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn flops_formula() {
        assert_eq!(
            ConvSpec::new(3, 64, 3, 2).flops(112, 112).unwrap(),
            10_838_016
        );
        assert_eq!(ConvSpec::new(64, 64, 1, 1).flops(1, 1).unwrap(), 8_192);
    }
}
