use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::{TrainConfig, ValSource};
use crate::data::{preprocess, IdentityDataset};
use crate::error::{Error, Result};
use crate::eval::{parse_pair_file, verify_10fold, PairList};
use crate::loss::{arcface_loss, ClassifierHead, MarginConfig};
use crate::nn::Mode;
use crate::optim::{lr_at, sam_step, sgd_step, OptimizerKind, Parameters, SamPass, Velocity};
use crate::tensor::Tensor;
use crate::zoo::Model;

pub const METRICS_LOG: &str = "metrics.jsonl";
const EMBED_CHUNK: usize = 64;
const HEAD_STREAM: u64 = 1;
const SHUFFLE_SEED_SALT: u64 = 0x5348_5546_464c_4531;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean 10-fold verification accuracy (percent) per validation set;
    /// only filled at checkpoint epochs.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub val: BTreeMap<String, f64>,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Everything a run updates: backbone, classifier head and momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub head: ClassifierHead<f32>,
    pub velocity: Velocity<f32>,
}

struct Net<'a> {
    model: &'a mut Model<f32>,
    head: &'a mut ClassifierHead<f32>,
}

impl Parameters<f32> for Net<'_> {
    fn params(&self) -> Vec<&Tensor<f32>> {
        let mut p = self.model.params();
        p.push(&self.head.class_weights);
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut p = self.model.params_mut();
        p.push(&mut self.head.class_weights);
        p
    }
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        let model = Model::build(&cfg.arch, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(HEAD_STREAM);
        Ok(Self {
            model,
            head: ClassifierHead::new(num_classes, cfg.arch.embedding_dim, &mut rng),
            velocity: Velocity::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let head = ckpt.head.ok_or_else(|| {
            Error::CorruptCheckpoint("checkpoint has no classifier head to resume from".into())
        })?;
        Ok(Self {
            model: ckpt.model,
            head,
            velocity: ckpt.velocity.unwrap_or_default(),
        })
    }

    pub fn checkpoint(
        &self,
        cfg: &TrainConfig,
        epoch: usize,
        metrics: &[EpochMetrics],
    ) -> Checkpoint {
        Checkpoint {
            epoch,
            schedule: cfg.schedule.clone(),
            metrics: metrics.to_vec(),
            model: self.model.clone(),
            head: Some(self.head.clone()),
            velocity: self
                .velocity
                .is_initialized()
                .then(|| self.velocity.clone()),
        }
    }

    /// One optimizer step on a batch; returns the loss at the current weights.
    pub fn step(
        &mut self,
        cfg: &TrainConfig,
        batch: &Tensor<f32>,
        labels: &[usize],
        lr: f64,
        epoch: usize,
    ) -> Result<f32> {
        let mut net = Net {
            model: &mut self.model,
            head: &mut self.head,
        };
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                let (loss, grads) =
                    loss_and_grads(&mut net, batch, labels, &cfg.loss, true, epoch)?;
                sgd_step(
                    &mut net.params_mut(),
                    &grads,
                    &mut self.velocity,
                    lr,
                    &cfg.sgd,
                )?;
                Ok(loss)
            }
            OptimizerKind::Sam => sam_step(
                &mut net,
                |net: &mut Net, pass| {
                    loss_and_grads(
                        net,
                        batch,
                        labels,
                        &cfg.loss,
                        pass == SamPass::Descent,
                        epoch,
                    )
                },
                &mut self.velocity,
                lr,
                &cfg.sam,
                &cfg.sgd,
            ),
        }
    }
}

fn loss_and_grads(
    net: &mut Net,
    batch: &Tensor<f32>,
    labels: &[usize],
    loss: &MarginConfig,
    commit: bool,
    epoch: usize,
) -> Result<(f32, Vec<Tensor<f32>>)> {
    let (emb, tape) = net.model.forward(batch, Mode::Train)?;
    let out = arcface_loss(&emb, net.head, labels, loss)?;
    if !out.loss.is_finite() {
        return Err(Error::DivergedLoss {
            epoch,
            loss: f64::from(out.loss),
        });
    }
    let grads = net.model.backward(&tape, &out.grad_embeddings)?;
    if commit {
        net.model.commit_running_stats(&tape);
    }
    let mut g = grads.params;
    g.push(out.grad_weights);
    Ok((out.loss, g))
}

/// Infer-mode, L2-normalized embeddings of preprocessed images, in order.
pub fn embed_all(model: &Model<f32>, images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut rows = Vec::with_capacity(images.len() * model.arch.embedding_dim);
    for chunk in images.chunks(EMBED_CHUNK) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        rows.extend(
            model
                .embed(&Tensor::stack(&refs)?, Mode::Infer)?
                .into_data(),
        );
    }
    let d = rows.len() / images.len().max(1);
    Tensor::new(vec![images.len(), d], rows)
}

/// A preprocessed validation pair set.
#[derive(Debug, Clone)]
pub struct ValSet {
    pub name: String,
    pub images: Vec<Tensor<f32>>,
    pub tags: Vec<Option<String>>,
    pub pairs: PairList,
}

impl ValSet {
    pub fn from_dataset(
        name: &str,
        ds: &IdentityDataset,
        genuine: usize,
        impostor: usize,
        seed: u64,
        size: usize,
    ) -> Result<Self> {
        let tags: Vec<Option<String>> = ds.records().iter().map(|r| r.tag.clone()).collect();
        let pairs = PairList::sample(&ds.labels(), Some(&tags), genuine, impostor, seed)?;
        Ok(Self {
            name: name.to_string(),
            images: ds.preprocess_all(size)?,
            tags,
            pairs,
        })
    }

    pub fn from_pair_file(name: &str, path: &Path, size: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pf = parse_pair_file(&text, path.parent().unwrap_or(Path::new(".")))?;
        let images = crate::exec::map_range(pf.paths.len(), |i| {
            preprocess(&crate::data::decode(&pf.paths[i])?, size)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            tags: vec![None; images.len()],
            images,
            pairs: pf.list,
        })
    }

    pub fn scores(&self, model: &Model<f32>) -> Result<Vec<f64>> {
        self.pairs.scores(&embed_all(model, &self.images)?)
    }

    /// Mean 10-fold verification accuracy in percent.
    pub fn accuracy(&self, model: &Model<f32>) -> Result<f64> {
        let scores = self.scores(model)?;
        Ok(verify_10fold(&scores, &self.pairs.labels(), self.pairs.fold_count())?.0)
    }
}

/// A checkpoint epoch and its validation accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub path: Option<PathBuf>,
    pub val: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<CheckpointRecord>,
}

/// Training data prepared once per run: preprocessed images, dense class
/// labels, and validation sets.
pub struct Prepared {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub val_sets: Vec<ValSet>,
}

pub fn prepare(cfg: &TrainConfig, dataset: &IdentityDataset) -> Result<Prepared> {
    cfg.validate()?;
    let (h, w) = cfg.arch.input_size;
    if h != w {
        return Err(Error::InvalidConfig(format!(
            "training images are square, arch.input_size is {h}x{w}"
        )));
    }
    let (train, held) = if cfg.holdout_per_id > 0 {
        dataset.split_holdout(cfg.holdout_per_id)?
    } else {
        (dataset.clone(), dataset.select(&[])?)
    };
    if train.num_identities() < 2 {
        return Err(Error::Data(format!(
            "training needs at least 2 identities, got {}",
            train.num_identities()
        )));
    }
    let class_of: BTreeMap<usize, usize> = train
        .identities()
        .enumerate()
        .map(|(c, id)| (id, c))
        .collect();
    let labels = train.labels().iter().map(|id| class_of[id]).collect();
    let mut val_sets = Vec::with_capacity(cfg.val_sets.len());
    for spec in &cfg.val_sets {
        val_sets.push(match &spec.source {
            ValSource::Holdout => ValSet::from_dataset(
                &spec.name,
                &held,
                cfg.val_genuine_pairs,
                cfg.val_impostor_pairs,
                cfg.seed,
                h,
            )?,
            ValSource::PairFile(p) => ValSet::from_pair_file(&spec.name, p, h)?,
        });
    }
    Ok(Prepared {
        images: train.preprocess_all(h)?,
        labels,
        num_classes: class_of.len(),
        val_sets,
    })
}

/// Batch order of one epoch: a seeded permutation cut into `batch_size`
/// pieces, dropping a final piece too small for batch statistics.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SEED_SALT);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Trains from scratch.
pub fn train_run(cfg: &TrainConfig, dataset: &IdentityDataset) -> Result<TrainOutcome> {
    let data = prepare(cfg, dataset)?;
    let state = TrainState::new(cfg, data.num_classes)?;
    run_epochs(cfg, &data, state, 0, Vec::new())
}

/// Continues a run from a checkpoint written by [`train_run`] with the same
/// configuration and dataset.
pub fn resume_run(
    cfg: &TrainConfig,
    dataset: &IdentityDataset,
    from: Checkpoint,
) -> Result<TrainOutcome> {
    let data = prepare(cfg, dataset)?;
    let start = from.epoch;
    if start > cfg.epochs {
        return Err(Error::InvalidConfig(format!(
            "checkpoint has {start} completed epochs, run is configured for {}",
            cfg.epochs
        )));
    }
    let history = from.metrics.clone();
    let state = TrainState::from_checkpoint(from)?;
    if state.head.num_classes() != data.num_classes {
        return Err(Error::Data(format!(
            "checkpoint head has {} classes, dataset has {}",
            state.head.num_classes(),
            data.num_classes
        )));
    }
    run_epochs(cfg, &data, state, start, history)
}

fn run_epochs(
    cfg: &TrainConfig,
    data: &Prepared,
    mut state: TrainState,
    start: usize,
    mut metrics: Vec<EpochMetrics>,
) -> Result<TrainOutcome> {
    let mut log = match &cfg.checkpoint_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_LOG);
            let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            for m in &metrics {
                writeln!(f, "{}", m.to_json_line()).map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let mut checkpoints = Vec::new();
    for epoch in start..cfg.epochs {
        let lr = lr_at(&cfg.schedule, epoch)?;
        let mut total = 0.0f64;
        let batches = epoch_batches(data.images.len(), cfg.batch_size, cfg.seed, epoch);
        if batches.is_empty() {
            return Err(Error::Data("fewer than 2 training images".into()));
        }
        for idx in &batches {
            let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &data.images[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            total += f64::from(state.step(cfg, &Tensor::stack(&refs)?, &labels, lr, epoch)?);
        }
        let train_loss = total / batches.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::DivergedLoss {
                epoch,
                loss: train_loss,
            });
        }
        let completed = epoch + 1;
        let mut val = BTreeMap::new();
        if cfg.is_checkpoint_epoch(completed) {
            for v in &data.val_sets {
                val.insert(v.name.clone(), v.accuracy(&state.model)?);
            }
        }
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_loss,
            val: val.clone(),
        });
        if let Some((f, path)) = &mut log {
            writeln!(f, "{}", metrics.last().expect("just pushed").to_json_line())
                .map_err(|e| Error::io(&*path, e))?;
        }
        if cfg.is_checkpoint_epoch(completed) {
            let path = match &cfg.checkpoint_dir {
                Some(dir) => {
                    let p = dir.join(checkpoint_file_name(completed));
                    save_checkpoint(&state.checkpoint(cfg, completed, &metrics), &p)?;
                    Some(p)
                }
                None => None,
            };
            checkpoints.push(CheckpointRecord {
                epoch: completed,
                path,
                val,
            });
        }
    }
    Ok(TrainOutcome {
        state,
        metrics,
        checkpoints,
    })
}

pub fn checkpoint_file_name(completed: usize) -> String {
    format!("epoch_{completed:03}.lwfr")
}

/// Ranks checkpoints by unweighted mean accuracy over `val_sets`, best
/// first; ties go to the earlier epoch.
pub fn select_best(
    checkpoints: &[CheckpointRecord],
    val_sets: &[String],
    top_n: usize,
) -> Result<Vec<CheckpointRecord>> {
    if val_sets.is_empty() {
        return Err(Error::MissingMetrics(
            "no validation sets to rank by".into(),
        ));
    }
    let mut scored = checkpoints
        .iter()
        .map(|c| {
            let sum = val_sets
                .iter()
                .map(|v| {
                    c.val.get(v).copied().ok_or_else(|| {
                        Error::MissingMetrics(format!("epoch {} has no accuracy for {v}", c.epoch))
                    })
                })
                .sum::<Result<f64>>()?;
            Ok((sum / val_sets.len() as f64, c))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.epoch.cmp(&b.1.epoch)));
    Ok(scored
        .into_iter()
        .take(top_n)
        .map(|(_, c)| c.clone())
        .collect())
}
