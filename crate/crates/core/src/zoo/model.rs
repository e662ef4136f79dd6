use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_backward, batchnorm_forward_with, conv2d, conv2d_backward, l2_normalize, prelu,
    prelu_backward, BatchNormState, BnCache, ConvSpec, Mode, PReLUState,
};
use crate::tensor::{Real, Tensor};
use crate::zoo::arch::{ArchConfig, BlockPlan, UnitPlan};

/// Convolution followed by optional batch norm and optional PReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<T: Real = f32> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bn: Option<BatchNormState<T>>,
    pub act: Option<PReLUState<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block<T: Real = f32> {
    Unit(ConvUnit<T>),
    Bottleneck {
        expand: ConvUnit<T>,
        depthwise: ConvUnit<T>,
        project: ConvUnit<T>,
        residual: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    pub arch: ArchConfig,
    pub blocks: Vec<Block<T>>,
}

/// Activations saved by a forward pass for the backward pass.
#[derive(Debug)]
pub struct Tape<T: Real> {
    blocks: Vec<BlockTape<T>>,
    batch: usize,
}

#[derive(Debug)]
enum BlockTape<T: Real> {
    Unit(UnitTape<T>),
    Bottleneck([UnitTape<T>; 3]),
}

#[derive(Debug)]
struct UnitTape<T: Real> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    act_input: Option<Tensor<T>>,
}

/// Gradients w.r.t. every parameter (in [`Model::params`] order) and the input.
#[derive(Debug, Clone)]
pub struct ModelGrads<T: Real> {
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

impl<T: Real> ConvUnit<T> {
    /// He-normal conv weights, unit BN scale, zero BN shift, 0.25 PReLU slopes.
    pub fn init(spec: ConvSpec, bn: bool, act: bool, rng: &mut ChaCha8Rng) -> Self {
        let (kh, kw) = spec.kernel;
        let fan_in = kh * kw * spec.in_channels / spec.groups;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            spec,
            weight: Tensor::randn(&spec.weight_shape(), std, rng),
            bn: bn.then(|| BatchNormState::new(spec.out_channels)),
            act: act.then(|| PReLUState::new(spec.out_channels)),
        }
    }

    fn from_plan(plan: &UnitPlan, rng: &mut ChaCha8Rng) -> Self {
        Self::init(plan.spec, true, plan.act, rng)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_tape(x, mode)?.0)
    }

    fn forward_tape(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, UnitTape<T>)> {
        let mut y = conv2d(x, &self.weight, &self.spec)?;
        let mut bn_cache = None;
        if let Some(bn) = &self.bn {
            let (out, cache) = batchnorm_forward_with(&y, bn, mode)?;
            y = out;
            bn_cache = Some(cache);
        }
        let mut act_input = None;
        if let Some(act) = &self.act {
            let out = prelu(&y, act)?;
            act_input = Some(y);
            y = out;
        }
        Ok((
            y,
            UnitTape {
                input: x.clone(),
                bn: bn_cache,
                act_input,
            },
        ))
    }

    /// Appends parameter gradients (weight, scale, shift, slope) in order and
    /// returns the input gradient.
    fn backward(
        &self,
        tape: &UnitTape<T>,
        grad: Tensor<T>,
        out: &mut Vec<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut g = grad;
        let mut slope_grad = None;
        if let (Some(act), Some(a_in)) = (&self.act, &tape.act_input) {
            let (dx, ds) = prelu_backward(a_in, act, &g)?;
            g = dx;
            slope_grad = Some(ds);
        }
        let mut bn_grads = None;
        if let (Some(bn), Some(cache)) = (&self.bn, &tape.bn) {
            let (dx, dscale, dshift) = batchnorm_backward(bn, cache, &g)?;
            g = dx;
            bn_grads = Some((dscale, dshift));
        }
        let (dx, dw) = conv2d_backward(&tape.input, &self.weight, &self.spec, &g)?;
        out.push(dw);
        if let Some((a, b)) = bn_grads {
            out.push(a);
            out.push(b);
        }
        out.extend(slope_grad);
        Ok(dx)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = vec![&self.weight];
        if let Some(bn) = &self.bn {
            p.push(&bn.scale);
            p.push(&bn.shift);
        }
        if let Some(act) = &self.act {
            p.push(&act.slope);
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = vec![&mut self.weight];
        if let Some(bn) = &mut self.bn {
            p.push(&mut bn.scale);
            p.push(&mut bn.shift);
        }
        if let Some(act) = &mut self.act {
            p.push(&mut act.slope);
        }
        p
    }

    fn param_names(&self, prefix: &str, out: &mut Vec<String>) {
        out.push(format!("{prefix}.conv.weight"));
        if self.bn.is_some() {
            out.push(format!("{prefix}.bn.scale"));
            out.push(format!("{prefix}.bn.shift"));
        }
        if self.act.is_some() {
            out.push(format!("{prefix}.prelu.slope"));
        }
    }

    pub fn count_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Per-sample FLOPs at input resolution `(h, w)`; returns the output resolution too.
    pub fn flops(&self, h: usize, w: usize) -> Result<(u64, (usize, usize))> {
        let mut total = self.spec.flops(h, w)?;
        let (ho, wo) = self.spec.output_hw(h, w)?;
        let elems = (self.spec.out_channels * ho * wo) as u64;
        if self.bn.is_some() {
            total += 2 * elems;
        }
        if self.act.is_some() {
            total += elems;
        }
        Ok((total, (ho, wo)))
    }

    fn commit(&mut self, tape: &UnitTape<T>) {
        if let (Some(bn), Some(cache)) = (&mut self.bn, &tape.bn) {
            bn.update_running(cache);
        }
    }
}

impl<T: Real> Block<T> {
    fn units(&self) -> Vec<&ConvUnit<T>> {
        match self {
            Block::Unit(u) => vec![u],
            Block::Bottleneck {
                expand,
                depthwise,
                project,
                ..
            } => vec![expand, depthwise, project],
        }
    }

    fn units_mut(&mut self) -> Vec<&mut ConvUnit<T>> {
        match self {
            Block::Unit(u) => vec![u],
            Block::Bottleneck {
                expand,
                depthwise,
                project,
                ..
            } => vec![expand, depthwise, project],
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_tape(x, mode)?.0)
    }

    fn forward_tape(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BlockTape<T>)> {
        match self {
            Block::Unit(u) => {
                let (y, t) = u.forward_tape(x, mode)?;
                Ok((y, BlockTape::Unit(t)))
            }
            Block::Bottleneck {
                expand,
                depthwise,
                project,
                residual,
            } => {
                let (h1, t1) = expand.forward_tape(x, mode)?;
                let (h2, t2) = depthwise.forward_tape(&h1, mode)?;
                let (mut y, t3) = project.forward_tape(&h2, mode)?;
                if *residual {
                    y.add_assign(x)?;
                }
                Ok((y, BlockTape::Bottleneck([t1, t2, t3])))
            }
        }
    }
}

impl<T: Real> Model<T> {
    /// Builds and initializes the layer sequence described by `arch`.
    pub fn build(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let plan = arch.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = plan
            .iter()
            .map(|b| match b {
                BlockPlan::Unit(u) => Block::Unit(ConvUnit::from_plan(u, &mut rng)),
                BlockPlan::Bottleneck {
                    expand,
                    depthwise,
                    project,
                    residual,
                } => Block::Bottleneck {
                    expand: ConvUnit::from_plan(expand, &mut rng),
                    depthwise: ConvUnit::from_plan(depthwise, &mut rng),
                    project: ConvUnit::from_plan(project, &mut rng),
                    residual: *residual,
                },
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            blocks,
        })
    }

    /// A model with explicitly supplied blocks (fixtures, partial networks).
    pub fn from_blocks(arch: ArchConfig, blocks: Vec<Block<T>>) -> Self {
        Self { arch, blocks }
    }

    pub fn units(&self) -> impl Iterator<Item = &ConvUnit<T>> {
        self.blocks.iter().flat_map(|b| b.units())
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.units().flat_map(|u| u.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.units_mut())
            .flat_map(|u| u.params_mut())
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Unit(u) => u.param_names(&format!("blocks.{i}"), &mut names),
                Block::Bottleneck {
                    expand,
                    depthwise,
                    project,
                    ..
                } => {
                    expand.param_names(&format!("blocks.{i}.expand"), &mut names);
                    depthwise.param_names(&format!("blocks.{i}.depthwise"), &mut names);
                    project.param_names(&format!("blocks.{i}.project"), &mut names);
                }
            }
        }
        names
    }

    /// Batch-norm running statistics (mean, var per BN layer), in layer order.
    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        self.units()
            .filter_map(|u| u.bn.as_ref())
            .flat_map(|bn| [&bn.running_mean, &bn.running_var])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.units_mut())
            .filter_map(|u| u.bn.as_mut())
            .flat_map(|bn| [&mut bn.running_mean, &mut bn.running_var])
            .collect()
    }

    pub fn buffer_names(&self) -> Vec<String> {
        self.param_names()
            .iter()
            .filter(|n| n.ends_with(".bn.scale"))
            .flat_map(|n| {
                let base = n.trim_end_matches(".scale");
                [
                    format!("{base}.running_mean"),
                    format!("{base}.running_var"),
                ]
            })
            .collect()
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn count_params(&self) -> usize {
        self.units().map(|u| u.count_params()).sum()
    }

    /// Per-sample forward FLOPs at `input_size` (1 MAC = 2 FLOPs).
    pub fn count_flops(&self, input_size: (usize, usize)) -> Result<u64> {
        let (mut h, mut w) = input_size;
        let mut total = 0;
        for u in self.units() {
            // bottleneck units chain just like plain ones
            let (f, hw) = u.flops(h, w)?;
            total += f;
            (h, w) = hw;
        }
        Ok(total)
    }

    /// Size of the learnable parameters as 32-bit floats, in MiB.
    pub fn size_mb(&self) -> f64 {
        model_size_mb(self.count_params())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let (n, c, h, w) = x.dims4()?;
        if c != 3 || (h, w) != self.arch.input_size {
            return Err(Error::shape(format!(
                "model expects (N, 3, {}, {}), got {:?}",
                self.arch.input_size.0,
                self.arch.input_size.1,
                x.shape()
            )));
        }
        Ok(n)
    }

    /// Runs every block, keeping what the backward pass needs. Returns raw
    /// `(N, embedding_dim)` features.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        let n = self.check_input(x)?;
        let mut tapes = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            let (y, t) = b.forward_tape(&h, mode)?;
            tapes.push(t);
            h = y;
        }
        let d = h.len() / n;
        Ok((
            h.reshape(&[n, d])?,
            Tape {
                blocks: tapes,
                batch: n,
            },
        ))
    }

    pub fn backward(&self, tape: &Tape<T>, grad_out: &Tensor<T>) -> Result<ModelGrads<T>> {
        let mut per_block: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.blocks.len());
        let (n, d) = grad_out.dims2()?;
        if n != tape.batch || tape.blocks.len() != self.blocks.len() {
            return Err(Error::shape(
                "gradient does not match the recorded forward pass",
            ));
        }
        let mut g = grad_out.clone().reshape(&[n, d, 1, 1])?;
        for (b, t) in self.blocks.iter().zip(&tape.blocks).rev() {
            let mut grads = Vec::new();
            g = match (b, t) {
                (Block::Unit(u), BlockTape::Unit(ut)) => u.backward(ut, g, &mut grads)?,
                (
                    Block::Bottleneck {
                        expand,
                        depthwise,
                        project,
                        residual,
                    },
                    BlockTape::Bottleneck([t1, t2, t3]),
                ) => {
                    let mut g3 = Vec::new();
                    let mut g2 = Vec::new();
                    let skip = residual.then(|| g.clone());
                    let d2 = project.backward(t3, g, &mut g3)?;
                    let d1 = depthwise.backward(t2, d2, &mut g2)?;
                    let mut dx = expand.backward(t1, d1, &mut grads)?;
                    grads.extend(g2);
                    grads.extend(g3);
                    if let Some(s) = skip {
                        dx.add_assign(&s)?;
                    }
                    dx
                }
                _ => return Err(Error::shape("tape does not match model")),
            };
            per_block.push(grads);
        }
        per_block.reverse();
        Ok(ModelGrads {
            params: per_block.into_iter().flatten().collect(),
            input: g,
        })
    }

    /// Folds the batch statistics recorded in `tape` into the running statistics.
    pub fn commit_running_stats(&mut self, tape: &Tape<T>) {
        for (b, t) in self.blocks.iter_mut().zip(&tape.blocks) {
            match (b, t) {
                (Block::Unit(u), BlockTape::Unit(ut)) => u.commit(ut),
                (
                    Block::Bottleneck {
                        expand,
                        depthwise,
                        project,
                        ..
                    },
                    BlockTape::Bottleneck([t1, t2, t3]),
                ) => {
                    expand.commit(t1);
                    depthwise.commit(t2);
                    project.commit(t3);
                }
                _ => unreachable!("tape recorded by this model"),
            }
        }
    }

    /// Embeddings for a batch. Infer mode L2-normalizes each row; train mode
    /// returns raw features (computed with batch statistics, without
    /// updating the running ones).
    pub fn embed(&self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, _) = self.forward(batch, mode)?;
        match mode {
            Mode::Infer => l2_normalize(&y),
            Mode::Train => Ok(y),
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let unit = |u: &ConvUnit<T>| ConvUnit {
            spec: u.spec,
            weight: u.weight.cast(),
            bn: u.bn.as_ref().map(|b| BatchNormState {
                scale: b.scale.cast(),
                shift: b.shift.cast(),
                running_mean: b.running_mean.cast(),
                running_var: b.running_var.cast(),
                eps: b.eps,
                momentum: b.momentum,
                mode: b.mode,
            }),
            act: u.act.as_ref().map(|a| PReLUState {
                slope: a.slope.cast(),
            }),
        };
        Model {
            arch: self.arch.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    Block::Unit(u) => Block::Unit(unit(u)),
                    Block::Bottleneck {
                        expand,
                        depthwise,
                        project,
                        residual,
                    } => Block::Bottleneck {
                        expand: unit(expand),
                        depthwise: unit(depthwise),
                        project: unit(project),
                        residual: *residual,
                    },
                })
                .collect(),
        }
    }
}

/// `params · 4 bytes / 2²⁰`.
pub fn model_size_mb(params: usize) -> f64 {
    params as f64 * 4.0 / (1u64 << 20) as f64
}
