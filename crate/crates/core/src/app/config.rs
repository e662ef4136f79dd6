//! Flat `section.key = value` configuration files.
//!
//! ```text
//! # comments run to the end of the line
//! arch.preset = mobilefacenet
//! arch.width_mult = 0.5
//! arch.input_size = 56
//! optim.kind = sam
//! schedule.stage_lrs = 0.1, 0.01, 0.001
//! train.checkpoint_epochs = 10, 20, 30
//! val.sets = holdout, lfw=pairs/lfw.txt
//! ```
//!
//! Unknown or repeated keys are errors. `arch.preset` is applied before any
//! other `arch.*` key regardless of line order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::MarginConfig;
use crate::optim::{LrSchedule, OptimizerKind, SamConfig, SgdConfig};
use crate::zoo::{ArchConfig, StageKind, StageSpec};

/// Where a validation pair list comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ValSource {
    /// Pairs sampled from images held out of the training set.
    Holdout,
    /// A pair file on disk.
    PairFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValSetSpec {
    pub name: String,
    pub source: ValSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub optimizer: OptimizerKind,
    pub sam: SamConfig,
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    pub loss: MarginConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub val_sets: Vec<ValSetSpec>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Completed-epoch counts after which validation runs and a checkpoint is
    /// written. The final epoch is always included.
    pub checkpoint_epochs: Vec<usize>,
    /// Images per identity removed from training for the `holdout` set.
    pub holdout_per_id: usize,
    pub val_genuine_pairs: usize,
    pub val_impostor_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::mobilefacenet(),
            optimizer: OptimizerKind::Sam,
            sam: SamConfig::default(),
            sgd: SgdConfig::default(),
            schedule: LrSchedule::default(),
            loss: MarginConfig::default(),
            batch_size: 128,
            epochs: 100,
            seed: 0,
            val_sets: Vec::new(),
            checkpoint_dir: None,
            checkpoint_epochs: (1..=10).map(|k| 10 * k).collect(),
            holdout_per_id: 0,
            val_genuine_pairs: 3000,
            val_impostor_pairs: 3000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.arch.validate()?;
        self.sam.validate()?;
        self.sgd.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        if self.batch_size < 2 {
            return bad(format!(
                "train.batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.epochs == 0 || self.epochs > self.schedule.total_epochs {
            return bad(format!(
                "train.epochs must lie in 1..={}, got {}",
                self.schedule.total_epochs, self.epochs
            ));
        }
        if self.checkpoint_epochs.contains(&0) {
            return bad(
                "train.checkpoint_epochs counts completed epochs and must be positive".into(),
            );
        }
        let has_holdout = self.val_sets.iter().any(|v| v.source == ValSource::Holdout);
        if has_holdout && self.holdout_per_id < 2 {
            return bad("the holdout validation set needs val.holdout_per_id >= 2".into());
        }
        let mut names: Vec<&str> = self.val_sets.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("validation set names must be unique".into());
        }
        Ok(())
    }

    /// Whether validation and checkpointing happen after `completed` epochs.
    pub fn is_checkpoint_epoch(&self, completed: usize) -> bool {
        completed == self.epochs || self.checkpoint_epochs.contains(&completed)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(n + 1, "expected `section.key = value`"))?;
            let key = key.trim().to_string();
            if entries
                .insert(key.clone(), (n + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(err(n + 1, &format!("`{key}` set twice")));
            }
        }
        let mut cfg = TrainConfig::default();
        if let Some((line, v)) = entries.remove("arch.preset") {
            cfg.arch = match v.as_str() {
                "mobilefacenet" => ArchConfig::mobilefacenet(),
                "mmobilefacenet" => ArchConfig::mmobilefacenet(),
                _ => return Err(err(line, &format!("unknown arch.preset `{v}`"))),
            };
        }
        for (key, (line, v)) in entries {
            let at = |e: Error| match e {
                Error::InvalidConfig(m) => err(line, &format!("{key}: {m}")),
                other => other,
            };
            cfg.apply(&key, &v, base).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn apply(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        match key {
            "arch.input_size" => {
                self.arch.input_size = match v.split_once('x') {
                    Some((h, w)) => (num(h)?, num(w)?),
                    None => (num(v)?, num(v)?),
                }
            }
            "arch.embedding_dim" => self.arch.embedding_dim = num(v)?,
            "arch.width_mult" => self.arch.width_mult = num(v)?,
            "arch.channel_round" => self.arch.channel_round = num(v)?,
            "arch.stage_table" => self.arch.stage_table = parse_stage_table(v)?,
            "optim.kind" => {
                self.optimizer = OptimizerKind::parse(v).ok_or_else(|| {
                    Error::InvalidConfig(format!("expected sgd or sam, got `{v}`"))
                })?
            }
            "optim.rho" => self.sam.rho = num(v)?,
            "optim.momentum" => self.sgd.momentum = num(v)?,
            "optim.weight_decay" => self.sgd.weight_decay = num(v)?,
            "schedule.stage_lrs" => self.schedule.stage_lrs = list(v)?,
            "schedule.stage_boundaries" => self.schedule.stage_boundaries = list(v)?,
            "schedule.gamma" => self.schedule.decay_gamma = num(v)?,
            "schedule.total_epochs" => self.schedule.total_epochs = num(v)?,
            "loss.scale" => self.loss.scale = num(v)?,
            "loss.margin" => self.loss.margin = num(v)?,
            "train.batch_size" => self.batch_size = num(v)?,
            "train.epochs" => self.epochs = num(v)?,
            "train.seed" => self.seed = num(v)?,
            "train.checkpoint_epochs" => self.checkpoint_epochs = list(v)?,
            "val.sets" => self.val_sets = parse_val_sets(v, base)?,
            "val.holdout_per_id" => self.holdout_per_id = num(v)?,
            "val.genuine_pairs" => self.val_genuine_pairs = num(v)?,
            "val.impostor_pairs" => self.val_impostor_pairs = num(v)?,
            _ => return Err(Error::InvalidConfig("unknown key".into())),
        }
        Ok(())
    }
}

fn err(line: usize, msg: &str) -> Error {
    Error::InvalidConfig(format!("line {line}: {msg}"))
}

fn num<T: FromStr>(v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse `{}`", v.trim())))
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(num).collect()
}

fn parse_val_sets(v: &str, base: &Path) -> Result<Vec<ValSetSpec>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| match entry.split_once('=') {
            None if entry == "holdout" => Ok(ValSetSpec {
                name: "holdout".into(),
                source: ValSource::Holdout,
            }),
            Some((name, path)) if !name.trim().is_empty() && !path.trim().is_empty() => {
                Ok(ValSetSpec {
                    name: name.trim().into(),
                    source: ValSource::PairFile(base.join(path.trim())),
                })
            }
            _ => Err(Error::InvalidConfig(format!(
                "validation set `{entry}` is neither `holdout` nor `name=pairs-file`"
            ))),
        })
        .collect()
}

/// Parses `kind(key=value, ...); ...`. Keys: `t` expansion, `c` channels,
/// `n` repeat, `s` stride, `k` kernel.
pub fn parse_stage_table(v: &str) -> Result<Vec<StageSpec>> {
    let bad = |m: String| Error::InvalidConfig(m);
    v.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|stage| {
            let (kind, rest) = stage
                .split_once('(')
                .ok_or_else(|| bad(format!("stage `{stage}` lacks `(...)`")))?;
            let args = rest
                .strip_suffix(')')
                .ok_or_else(|| bad(format!("stage `{stage}` lacks a closing `)`")))?;
            let kind = StageKind::parse(kind.trim())
                .ok_or_else(|| bad(format!("unknown stage kind `{}`", kind.trim())))?;
            let mut spec = match kind {
                StageKind::Conv => StageSpec::conv(0, 3, 1),
                StageKind::Dwconv => StageSpec::dwconv(0, 3, 1),
                StageKind::Bottleneck => StageSpec::bottleneck(1, 0, 1, 1),
                StageKind::Gdconv => StageSpec::gdconv(0),
                StageKind::LinearConv => StageSpec::linear_conv(),
            };
            for arg in args.split(',').map(str::trim).filter(|a| !a.is_empty()) {
                let (k, val) = arg
                    .split_once('=')
                    .ok_or_else(|| bad(format!("stage argument `{arg}` is not key=value")))?;
                let val: usize = num(val)?;
                match k.trim() {
                    "t" => spec.expansion = val,
                    "c" => spec.channels = val,
                    "n" => spec.repeat = val,
                    "s" => spec.stride = val,
                    "k" => spec.kernel = val,
                    other => return Err(bad(format!("unknown stage argument `{other}`"))),
                }
            }
            Ok(spec)
        })
        .collect()
}

/// Inverse of [`parse_stage_table`].
pub fn format_stage_table(table: &[StageSpec]) -> String {
    table
        .iter()
        .map(|s| match s.kind {
            StageKind::Conv | StageKind::Dwconv => {
                format!(
                    "{}(c={}, k={}, s={})",
                    s.kind.name(),
                    s.channels,
                    s.kernel,
                    s.stride
                )
            }
            StageKind::Bottleneck => format!(
                "bottleneck(t={}, c={}, n={}, s={})",
                s.expansion, s.channels, s.repeat, s.stride
            ),
            StageKind::Gdconv => format!("gdconv(k={})", s.kernel),
            StageKind::LinearConv => "linear_conv()".to_string(),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let text = "# desk run\narch.width_mult = 0.5  # narrow\narch.input_size = 56\narch.preset = mobilefacenet\n\
                    optim.kind = sgd\nschedule.stage_lrs = 0.1, 0.05\nschedule.stage_boundaries = 10\n\
                    schedule.total_epochs = 30\ntrain.epochs = 30\nval.sets = holdout, lfw=p/lfw.txt\n\
                    val.holdout_per_id = 4\n";
        let cfg = TrainConfig::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.arch.width_mult, 0.5);
        assert_eq!(cfg.arch.input_size, (56, 56));
        assert_eq!(cfg.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.schedule.stage_lrs, vec![0.1, 0.05]);
        assert_eq!(
            cfg.val_sets[1].source,
            ValSource::PairFile("/cfg/p/lfw.txt".into())
        );
        assert_eq!(cfg.loss, MarginConfig::default());
    }

    #[test]
    fn unknown_repeated_and_malformed_keys_fail() {
        for text in [
            "optim.rhoo = 0.1\n",
            "optim.rho = 0.1\noptim.rho = 0.2\n",
            "optim.rho 0.1\n",
            "optim.rho = fast\n",
            "optim.kind = adam\n",
            "train.batch_size = 1\n",
            "train.epochs = 101\n",
        ] {
            let e = TrainConfig::parse(text, Path::new(".")).unwrap_err();
            assert!(e.is_config_error(), "{text}: {e}");
        }
    }

    #[test]
    fn stage_table_round_trip() {
        let table = crate::zoo::mobilefacenet_table();
        let text = format_stage_table(&table);
        assert_eq!(parse_stage_table(&text).unwrap(), table);
        assert!(parse_stage_table("conv(c=8, q=1)").is_err());
        assert!(parse_stage_table("pool(k=2)").is_err());
    }

    #[test]
    fn default_checkpoints_cover_stage_boundaries() {
        let cfg = TrainConfig::default();
        assert!(cfg.is_checkpoint_epoch(20) && cfg.is_checkpoint_epoch(50));
        assert!(cfg.is_checkpoint_epoch(100) && !cfg.is_checkpoint_epoch(21));
    }
}
