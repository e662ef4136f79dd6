//! The `lwfr` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::checkpoint::load_checkpoint;
use super::config::TrainConfig;
use super::report::{model_report, report};
use super::train::{embed_all, resume_run, select_best, train_run};
use crate::data::{
    decode, preprocess, sample_subset, synth_dataset, IdentityDataset, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    parse_pair_file, parse_subgroup_accuracies, rank_k, tar_at_far, verify_10fold, EvalReport,
    PairList, DEFAULT_FAR_LEVELS,
};
use crate::exec::{set_parallelism, Parallelism};
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "lwfr",
    version,
    about = "Train and benchmark lightweight face-embedding models"
)]
pub struct Cli {
    /// Run on a single thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on an identity directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints and the metrics log.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a pair file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// False accept levels for TAR; defaults to 1e-5..1e-2, skipping
        /// levels with too few impostor pairs.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        far_levels: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// `tag<TAB>accuracy` lines for subgroup mean, std and SER.
        #[arg(long)]
        subgroups: Option<PathBuf>,
        /// Identity directory for rank-1/rank-5: the first image of each
        /// identity is the gallery, the rest are probes.
        #[arg(long)]
        identities: Option<PathBuf>,
    },
    /// Print parameter count, FLOPs and size of a checkpoint.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Draw an identity subset from a dataset directory.
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_ids: usize,
        #[arg(long, default_value_t = 30)]
        min: usize,
        #[arg(long, default_value_t = 50)]
        max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic identity dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ids: usize,
        #[arg(long)]
        per_id: usize,
        #[arg(long, default_value_t = 112)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Also write `pairs.txt` with up to this many genuine and impostor pairs.
        #[arg(long)]
        pairs: Option<usize>,
    },
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config_error() {
        EXIT_CONFIG
    } else if e.is_data_error() {
        EXIT_DATA
    } else {
        EXIT_FAILURE
    }
}

/// Runs a parsed command and returns what it prints.
pub fn run(cli: Cli) -> Result<String> {
    if cli.sequential {
        set_parallelism(Parallelism::Sequential);
    }
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
        } => train(&config, &data, &out, seed, resume.as_deref()),
        Command::Eval {
            checkpoint,
            pairs,
            far_levels,
            folds,
            subgroups,
            identities,
        } => evaluate(
            &checkpoint,
            &pairs,
            &far_levels,
            folds,
            subgroups.as_deref(),
            identities.as_deref(),
        ),
        Command::Report { checkpoint } => Ok(report(&checkpoint)?.to_json() + "\n"),
        Command::Sample {
            data,
            out,
            num_ids,
            min,
            max,
            seed,
        } => {
            let ds = IdentityDataset::load_dir(&data)?;
            let cfg = SamplerConfig {
                num_identities: num_ids,
                min_per_id: min,
                max_per_id: max,
                seed,
            };
            let sub = sample_subset(&ds, &cfg)?;
            sub.save_dir(&out)?;
            Ok(format!(
                "wrote {} images of {} identities to {}\n",
                sub.len(),
                sub.num_identities(),
                out.display()
            ))
        }
        Command::Synth {
            out,
            ids,
            per_id,
            size,
            seed,
            noise,
            pairs,
        } => {
            let ds = synth_dataset(ids, per_id, size, noise, seed)?;
            let written = ds.save_dir(&out)?;
            if let Some(n) = pairs {
                let tags: Vec<Option<String>> =
                    ds.records().iter().map(|r| r.tag.clone()).collect();
                let list = PairList::sample(&ds.labels(), Some(&tags), n, n, seed)?;
                let rel: Vec<PathBuf> = written
                    .iter()
                    .map(|p| p.strip_prefix(&out).unwrap_or(p).to_path_buf())
                    .collect();
                let path = out.join("pairs.txt");
                std::fs::write(&path, list.to_pair_file(&rel)).map_err(|e| Error::io(path, e))?;
            }
            Ok(format!(
                "wrote {} images of {} identities to {}\n",
                ds.len(),
                ids,
                out.display()
            ))
        }
    }
}

fn train(
    config: &Path,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<String> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.checkpoint_dir = Some(out.to_path_buf());
    let ds = IdentityDataset::load_dir(data)?;
    let outcome = match resume {
        Some(p) => resume_run(&cfg, &ds, load_checkpoint(p)?)?,
        None => train_run(&cfg, &ds)?,
    };
    let mut text = String::new();
    if let Some(last) = outcome.metrics.last() {
        text += &format!(
            "final epoch {}: train_loss {:.6}\n",
            last.epoch, last.train_loss
        );
    }
    let names: Vec<String> = cfg.val_sets.iter().map(|v| v.name.clone()).collect();
    if !names.is_empty() {
        for (rank, c) in select_best(&outcome.checkpoints, &names, 2)?
            .iter()
            .enumerate()
        {
            let path = c
                .path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default();
            let accs: Vec<String> = c.val.iter().map(|(k, v)| format!("{k} {v:.2}")).collect();
            text += &format!(
                "best #{}: epoch {} ({}) {path}\n",
                rank + 1,
                c.epoch,
                accs.join(", ")
            );
        }
    }
    Ok(text)
}

fn evaluate(
    checkpoint: &Path,
    pairs: &Path,
    far_levels: &[f64],
    folds: usize,
    subgroups: Option<&Path>,
    identities: Option<&Path>,
) -> Result<String> {
    let model = load_checkpoint(checkpoint)?.model;
    let (h, w) = model.arch.input_size;
    if h != w {
        return Err(Error::InvalidConfig(format!(
            "evaluation needs square inputs, model takes {h}x{w}"
        )));
    }
    let text = std::fs::read_to_string(pairs).map_err(|e| Error::io(pairs, e))?;
    let pf = parse_pair_file(&text, pairs.parent().unwrap_or(Path::new(".")))?;
    let images = crate::exec::map_range(pf.paths.len(), |i| preprocess(&decode(&pf.paths[i])?, h))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let scores = pf.list.scores(&embed_all(&model, &images)?)?;
    let (acc_mean, acc_std) = verify_10fold(&scores, &pf.list.labels(), folds)?;
    let (gen, imp) = pf.list.split_scores(&scores);
    let levels: Vec<f64> = if far_levels.is_empty() {
        DEFAULT_FAR_LEVELS
            .into_iter()
            .filter(|&l| !imp.is_empty() && 1.0 / imp.len() as f64 <= l)
            .collect()
    } else {
        far_levels.to_vec()
    };
    let stats = model_report(&model)?;
    let mut rep = EvalReport {
        accuracy_mean: Some(acc_mean),
        accuracy_std: Some(acc_std),
        tar_at_far: if gen.is_empty() {
            Vec::new()
        } else {
            tar_at_far(&gen, &imp, &levels)?
        },
        flops: stats.flops,
        params: stats.params,
        size_mb: stats.size_mb,
        ..Default::default()
    };
    if let Some(dir) = identities {
        let (r1, r5) = identification(&model, &IdentityDataset::load_dir(dir)?, h)?;
        rep.rank1 = Some(r1);
        rep.rank5 = Some(r5);
    }
    let accs = match subgroups {
        Some(p) => {
            parse_subgroup_accuracies(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?
        }
        None => BTreeMap::new(),
    };
    Ok(rep.with_subgroups(accs)?.to_json() + "\n")
}

fn identification(
    model: &crate::zoo::Model<f32>,
    ds: &IdentityDataset,
    size: usize,
) -> Result<(f64, f64)> {
    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    for idx in ds.identity_index().values() {
        gallery.push(idx[0]);
        probes.extend_from_slice(&idx[1..]);
    }
    if probes.is_empty() {
        return Err(Error::Data(
            "identification needs identities with at least 2 images".into(),
        ));
    }
    let labels = ds.labels();
    let embed = |idx: &[usize]| -> Result<Tensor<f32>> {
        embed_all(model, &ds.select(idx)?.preprocess_all(size)?)
    };
    let (g, p) = (embed(&gallery)?, embed(&probes)?);
    let gl: Vec<usize> = gallery.iter().map(|&i| labels[i]).collect();
    let pl: Vec<usize> = probes.iter().map(|&i| labels[i]).collect();
    Ok((
        rank_k(&p, &pl, &g, &gl, 1)?,
        rank_k(&p, &pl, &g, &gl, 5.min(gallery.len()))?,
    ))
}
