//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use lwfr::app::TrainConfig;
use lwfr::loss::ArcFaceCheck;
use lwfr::loss::{arcface_loss, ClassifierHead, MarginConfig};
use lwfr::nn::gradcheck::targets::{BatchNorm, Conv, L2Normalize, PRelu};
use lwfr::nn::{gradient_check, gradient_check_at, ConvSpec, GradTarget, Mode};
use lwfr::zoo::{ArchConfig, Model, StageKind, StageSpec};
use lwfr::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameter count straight from the layer table: every conv carries BN
/// (scale + shift) and all but projections, gdconv and the embedding layer
/// carry a PReLU slope per channel.
pub fn param_count_oracle(arch: &ArchConfig) -> usize {
    let round = |c: usize| {
        let r = arch.channel_round as f64;
        (((c as f64 * arch.width_mult) / r).round() * r).max(r) as usize
    };
    let bn = |c: usize| 2 * c;
    let mut cin = 3;
    let mut total = 0;
    let mut spatial = arch.input_size.0;
    for s in &arch.stage_table {
        match s.kind {
            StageKind::Conv => {
                let c = round(s.channels);
                total += s.kernel * s.kernel * cin * c + bn(c) + c;
                total += (s.repeat - 1) * (s.kernel * s.kernel * c * c + bn(c) + c);
                cin = c;
                spatial = (spatial + 2 * ((s.kernel - 1) / 2) - s.kernel) / s.stride + 1;
            }
            StageKind::Dwconv => {
                total += s.repeat * (s.kernel * s.kernel * cin + bn(cin) + cin);
                spatial = (spatial + 2 * ((s.kernel - 1) / 2) - s.kernel) / s.stride + 1;
            }
            StageKind::Bottleneck => {
                let c = round(s.channels);
                for r in 0..s.repeat {
                    let hidden = cin * s.expansion;
                    total += cin * hidden + bn(hidden) + hidden;
                    total += 9 * hidden + bn(hidden) + hidden;
                    total += hidden * c + bn(c);
                    if r == 0 {
                        spatial = (spatial + 2 - 3) / s.stride + 1;
                    }
                    cin = c;
                }
            }
            StageKind::Gdconv => {
                total += spatial * spatial * cin + bn(cin);
                spatial = 1;
            }
            StageKind::LinearConv => {
                total += cin * arch.embedding_dim + bn(arch.embedding_dim);
                cin = arch.embedding_dim;
            }
        }
    }
    total
}

/// Fold accuracies by exhaustive search over every candidate threshold.
pub fn brute_verify(scores: &[f64], labels: &[bool], folds: usize) -> Vec<f64> {
    let n = scores.len();
    (0..folds)
        .map(|f| {
            let (lo, hi) = (f * n / folds, (f + 1) * n / folds);
            let train: Vec<usize> = (0..n).filter(|i| !(lo..hi).contains(i)).collect();
            let mut uniq: Vec<f64> = train.iter().map(|&i| scores[i]).collect();
            uniq.sort_by(f64::total_cmp);
            uniq.dedup();
            let mut cands = vec![f64::NEG_INFINITY];
            cands.extend(uniq.windows(2).map(|w| (w[0] + w[1]) / 2.0));
            cands.push(f64::INFINITY);
            let acc = |idx: &mut dyn Iterator<Item = usize>, t: f64| {
                let (mut hit, mut tot) = (0, 0);
                for i in idx {
                    tot += 1;
                    if (scores[i] > t) == labels[i] {
                        hit += 1;
                    }
                }
                hit as f64 / tot as f64
            };
            let mut best = (-1.0, 0.0);
            for &t in &cands {
                let a = acc(&mut train.iter().copied(), t);
                if a > best.0 {
                    best = (a, t);
                }
            }
            100.0 * acc(&mut (lo..hi), best.1)
        })
        .collect()
}

pub fn brute_tar(genuine: &[f64], impostor: &[f64], level: f64) -> f64 {
    let mut cands: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    cands.push(f64::INFINITY);
    cands.sort_by(f64::total_cmp);
    for t in cands {
        let far = impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
        if far <= level {
            return genuine.iter().filter(|&&s| s >= t).count() as f64 / genuine.len() as f64;
        }
    }
    unreachable!("+inf admits no impostor")
}

pub fn brute_rank(
    probes: &[Vec<f64>],
    plabels: &[usize],
    gallery: &[Vec<f64>],
    glabels: &[usize],
    k: usize,
) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        (dot / (na * nb)).clamp(-1.0, 1.0)
    };
    let mut hits = 0;
    for (p, &l) in probes.iter().zip(plabels) {
        let mut order: Vec<(f64, usize)> = gallery
            .iter()
            .enumerate()
            .map(|(j, g)| (cos(p, g), j))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if order[..k].iter().any(|&(_, j)| glabels[j] == l) {
            hits += 1;
        }
    }
    100.0 * hits as f64 / probes.len() as f64
}

/// A small network using every layer kind: 8×8 input, 8-d embedding.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        input_size: (8, 8),
        embedding_dim: 8,
        width_mult: 1.0,
        channel_round: 1,
        stage_table: vec![
            StageSpec::conv(4, 3, 2),
            StageSpec::dwconv(4, 3, 1),
            StageSpec::bottleneck(2, 4, 1, 1),
            StageSpec::bottleneck(2, 6, 1, 2),
            StageSpec::conv(8, 1, 1),
            StageSpec::gdconv(0),
            StageSpec::linear_conv(),
        ],
        channel_override: None,
    }
}

/// Whole model plus margin loss as one function of `[input, params..., class_weights]`.
pub struct ModelCheck {
    pub model: Model<f64>,
    pub labels: Vec<usize>,
    pub cfg: MarginConfig,
}

impl ModelCheck {
    fn load(&mut self, vars: &[Tensor<f64>]) {
        for (p, v) in self.model.params_mut().into_iter().zip(&vars[1..]) {
            *p = v.clone();
        }
    }

    fn head(vars: &[Tensor<f64>]) -> ClassifierHead<f64> {
        ClassifierHead {
            class_weights: vars.last().unwrap().clone(),
        }
    }

    pub fn variables(&self, input: Tensor<f64>, head: &ClassifierHead<f64>) -> Vec<Tensor<f64>> {
        let mut v = vec![input];
        v.extend(self.model.params().into_iter().cloned());
        v.push(head.class_weights.clone());
        v
    }
}

impl GradTarget for ModelCheck {
    fn forward(&mut self, vars: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        self.load(vars);
        let (emb, _) = self.model.forward(&vars[0], Mode::Train)?;
        let out = arcface_loss(&emb, &Self::head(vars), &self.labels, &self.cfg)?;
        Tensor::new(vec![1], vec![out.loss])
    }

    fn backward(&mut self, vars: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        self.load(vars);
        let (emb, tape) = self.model.forward(&vars[0], Mode::Train)?;
        let out = arcface_loss(&emb, &Self::head(vars), &self.labels, &self.cfg)?;
        let grads = self.model.backward(&tape, &out.grad_embeddings)?;
        let mut all = vec![grads.input];
        all.extend(grads.params);
        all.push(out.grad_weights);
        for t in &mut all {
            t.scale(g.data()[0]);
        }
        Ok(all)
    }
}

/// Maximum relative gradient error of every differentiable op and of the
/// whole tiny model, in 64-bit arithmetic.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let convs = [
        ConvSpec::new(3, 4, 3, 1),
        ConvSpec::new(3, 4, 3, 2),
        ConvSpec::new(4, 5, 1, 1),
        ConvSpec::new(4, 6, 3, 1).with_groups(2),
        ConvSpec::depthwise(3, 3, 1),
        ConvSpec::depthwise(3, 3, 2),
        ConvSpec::depthwise(4, 4, 1).with_padding(0),
    ];
    for (spec, hw) in convs.into_iter().zip([5, 6, 3, 4, 5, 6, 4]) {
        let shapes = vec![
            vec![2, spec.in_channels, hw, hw],
            spec.weight_shape().to_vec(),
        ];
        out.push((
            format!("conv2d {spec:?}"),
            gradient_check(&mut Conv(spec), &shapes, 11).unwrap(),
        ));
    }
    for mode in [Mode::Train, Mode::Infer] {
        let shapes = vec![vec![3, 2, 2, 2], vec![2], vec![2]];
        out.push((
            format!("batchnorm {mode:?}"),
            gradient_check(&mut BatchNorm::new(2, mode), &shapes, 3).unwrap(),
        ));
    }
    out.push((
        "prelu".into(),
        gradient_check(&mut PRelu, &[vec![2, 3, 2, 2], vec![3]], 4).unwrap(),
    ));
    out.push((
        "l2_normalize".into(),
        gradient_check(&mut L2Normalize, &[vec![4, 6]], 5).unwrap(),
    ));
    for (seed, labels) in [(6u64, vec![0, 3, 3, 1]), (7, vec![2, 2, 0, 1])] {
        let mut target = ArcFaceCheck {
            labels,
            cfg: MarginConfig::default(),
        };
        let err = gradient_check(&mut target, &[vec![4, 16], vec![5, 16]], seed).unwrap();
        out.push((format!("arcface_loss seed {seed}"), err));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = Model::<f64>::build(&tiny_arch(), 2).unwrap();
    let head = ClassifierHead::new(3, 8, &mut rng);
    let input = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng);
    let mut target = ModelCheck {
        model,
        labels: vec![0, 1, 2, 1],
        cfg: MarginConfig::default(),
    };
    let vars = target.variables(input, &head);
    out.push((
        "tiny model end to end".into(),
        gradient_check_at(&mut target, vars, 9).unwrap(),
    ));
    out
}

/// Single-layer FLOP fixtures: `(layer, input side, 2·MACs)`.
pub fn flop_fixtures() -> Vec<(ConvSpec, usize, u64)> {
    vec![
        (ConvSpec::new(3, 64, 3, 2), 112, 10_838_016),
        (ConvSpec::depthwise(64, 3, 1), 56, 2 * 9 * 64 * 56 * 56),
        (ConvSpec::new(64, 128, 1, 1), 28, 2 * 64 * 128 * 28 * 28),
        (
            ConvSpec::depthwise(512, 7, 1).with_padding(0),
            7,
            2 * 49 * 512,
        ),
        (ConvSpec::new(512, 512, 1, 1), 1, 2 * 512 * 512),
    ]
}

/// Random labelled scores with genuine pairs shifted up.
pub fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    // two-decimal scores so that ties occur
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let scores = labels
        .iter()
        .map(|&g| {
            let base: f64 = rng.random_range(0.0..1.0) + if g { 0.3 } else { 0.0 };
            (base * 100.0).round() / 100.0
        })
        .collect();
    (scores, labels)
}

/// Small fast training configuration for behavioural tests.
pub fn quick_config(extra: &str) -> TrainConfig {
    let text = format!(
        "arch.width_mult = 0.25\narch.input_size = 28\narch.embedding_dim = 32\n\
         train.batch_size = 8\ntrain.epochs = 2\ntrain.seed = 5\n\
         schedule.stage_lrs = 0.1, 0.01\nschedule.stage_boundaries = 1\nschedule.total_epochs = 3\n\
         train.checkpoint_epochs = 1\nval.sets = holdout\nval.holdout_per_id = 2\n{extra}"
    );
    TrainConfig::parse(&text, Path::new(".")).unwrap()
}

/// The desk-scale run.
pub fn desk_config(optimizer: &str) -> TrainConfig {
    let text = format!(
        "arch.width_mult = 0.5\narch.input_size = 56\noptim.kind = {optimizer}\noptim.rho = 0.02\n\
         train.batch_size = 16\ntrain.epochs = 20\ntrain.seed = 1\n\
         schedule.stage_boundaries = 10, 15\nschedule.total_epochs = 20\n\
         train.checkpoint_epochs = 10\nval.sets = holdout\nval.holdout_per_id = 4\n"
    );
    TrainConfig::parse(&text, Path::new(".")).unwrap()
}
