//! Binary checkpoint format.
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `LWFR` |
//! | 4 | format version, u32 little-endian (1) |
//! | 8 | metadata length `L`, u64 little-endian |
//! | L | UTF-8 JSON metadata |
//! | rest | little-endian f32 tensor data in manifest order |
//!
//! The metadata holds the architecture and exact block layout, the number of
//! completed epochs, the schedule, the metric history, and the tensor
//! manifest (`name`, `shape`, `dtype`, `role`). Roles are `param` and
//! `buffer` for the model, `head` for the classifier weights and `velocity`
//! for momentum buffers; `optimizer_state` is true iff velocity is present.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::EpochMetrics;
use crate::error::{Error, Result};
use crate::loss::ClassifierHead;
use crate::nn::{BatchNormState, ConvSpec, PReLUState};
use crate::optim::{LrSchedule, Velocity};
use crate::tensor::Tensor;
use crate::zoo::{ArchConfig, Block, ConvUnit, Model};

pub const MAGIC: [u8; 4] = *b"LWFR";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Completed training epochs.
    pub epoch: usize,
    pub schedule: LrSchedule,
    pub metrics: Vec<EpochMetrics>,
    pub model: Model<f32>,
    pub head: Option<ClassifierHead<f32>>,
    pub velocity: Option<Velocity<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Param,
    Buffer,
    Head,
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct UnitLayout {
    spec: ConvSpec,
    bn: bool,
    act: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum BlockLayout {
    Unit {
        unit: UnitLayout,
    },
    Bottleneck {
        units: [UnitLayout; 3],
        residual: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub arch: ArchConfig,
    layout: Vec<BlockLayout>,
    pub epoch: usize,
    pub schedule: LrSchedule,
    pub metrics: Vec<EpochMetrics>,
    pub optimizer_state: bool,
    pub tensors: Vec<ManifestEntry>,
}

impl Metadata {
    /// Payload bytes implied by the manifest.
    pub fn payload_len(&self) -> usize {
        4 * self
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum::<usize>()
    }
}

fn unit_layout(u: &ConvUnit<f32>) -> UnitLayout {
    UnitLayout {
        spec: u.spec,
        bn: u.bn.is_some(),
        act: u.act.is_some(),
    }
}

fn empty_unit(l: &UnitLayout) -> ConvUnit<f32> {
    ConvUnit {
        spec: l.spec,
        weight: Tensor::zeros(&l.spec.weight_shape()),
        bn: l.bn.then(|| BatchNormState::new(l.spec.out_channels)),
        act: l.act.then(|| PReLUState::new(l.spec.out_channels)),
    }
}

fn layout_of(model: &Model<f32>) -> Vec<BlockLayout> {
    model
        .blocks
        .iter()
        .map(|b| match b {
            Block::Unit(u) => BlockLayout::Unit {
                unit: unit_layout(u),
            },
            Block::Bottleneck {
                expand,
                depthwise,
                project,
                residual,
            } => BlockLayout::Bottleneck {
                units: [
                    unit_layout(expand),
                    unit_layout(depthwise),
                    unit_layout(project),
                ],
                residual: *residual,
            },
        })
        .collect()
}

fn model_from_layout(arch: ArchConfig, layout: &[BlockLayout]) -> Result<Model<f32>> {
    let blocks = layout
        .iter()
        .map(|b| {
            let check = |l: &UnitLayout| {
                l.spec
                    .validate()
                    .map_err(|e| Error::CorruptCheckpoint(format!("layout: {e}")))
            };
            Ok(match b {
                BlockLayout::Unit { unit } => {
                    check(unit)?;
                    Block::Unit(empty_unit(unit))
                }
                BlockLayout::Bottleneck { units, residual } => {
                    units.iter().try_for_each(check)?;
                    Block::Bottleneck {
                        expand: empty_unit(&units[0]),
                        depthwise: empty_unit(&units[1]),
                        project: empty_unit(&units[2]),
                        residual: *residual,
                    }
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model::from_blocks(arch, blocks))
}

fn entries<'a>(
    names: Vec<String>,
    tensors: impl IntoIterator<Item = &'a Tensor<f32>>,
    role: Role,
) -> Vec<ManifestEntry> {
    names
        .into_iter()
        .zip(tensors)
        .map(|(name, t)| ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            role,
        })
        .collect()
}

impl Checkpoint {
    /// A checkpoint holding only model weights and statistics.
    pub fn inference(model: Model<f32>) -> Self {
        Self {
            epoch: 0,
            schedule: LrSchedule::default(),
            metrics: Vec::new(),
            model,
            head: None,
            velocity: None,
        }
    }

    fn tensors(&self) -> (Vec<ManifestEntry>, Vec<&Tensor<f32>>) {
        let mut manifest: Vec<ManifestEntry> = Vec::new();
        let mut data: Vec<&Tensor<f32>> = Vec::new();
        let params = self.model.params();
        manifest.extend(entries(
            self.model.param_names(),
            params.iter().copied(),
            Role::Param,
        ));
        data.extend(params);
        let buffers = self.model.buffers();
        manifest.extend(entries(
            self.model.buffer_names(),
            buffers.iter().copied(),
            Role::Buffer,
        ));
        data.extend(buffers);
        if let Some(h) = &self.head {
            manifest.extend(entries(
                vec!["head.class_weights".into()],
                [&h.class_weights],
                Role::Head,
            ));
            data.push(&h.class_weights);
        }
        if let Some(v) = &self.velocity {
            let names = (0..v.buffers.len())
                .map(|i| format!("velocity.{i}"))
                .collect();
            manifest.extend(entries(names, &v.buffers, Role::Velocity));
            data.extend(&v.buffers);
        }
        (manifest, data)
    }

    pub fn metadata(&self) -> Metadata {
        Metadata {
            arch: self.model.arch.clone(),
            layout: layout_of(&self.model),
            epoch: self.epoch,
            schedule: self.schedule.clone(),
            metrics: self.metrics.clone(),
            optimizer_state: self.velocity.is_some(),
            tensors: self.tensors().0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata()).expect("metadata serializes");
        let (_, data) = self.tensors();
        let payload: usize = data.iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + 4 * payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for t in data {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: String| Error::CorruptCheckpoint(m);
        let (meta, payload) = split(bytes)?;
        let meta: Metadata =
            serde_json::from_slice(meta).map_err(|e| corrupt(format!("metadata: {e}")))?;
        if let Some(t) = meta.tensors.iter().find(|t| t.dtype != "f32") {
            return Err(corrupt(format!("tensor {} has dtype {}", t.name, t.dtype)));
        }
        if payload.len() != meta.payload_len() {
            return Err(corrupt(format!(
                "payload is {} bytes, manifest needs {}",
                payload.len(),
                meta.payload_len()
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut read = |e: &ManifestEntry| -> Result<Tensor<f32>> {
            let n = e.shape.iter().product();
            Tensor::new(e.shape.clone(), values.by_ref().take(n).collect())
                .map_err(|err| corrupt(format!("tensor {}: {err}", e.name)))
        };

        let mut model = model_from_layout(meta.arch.clone(), &meta.layout)?;
        let mut expected: Vec<(String, Vec<usize>, Role)> = Vec::new();
        for (n, t) in model.param_names().into_iter().zip(model.params()) {
            expected.push((n, t.shape().to_vec(), Role::Param));
        }
        for (n, t) in model.buffer_names().into_iter().zip(model.buffers()) {
            expected.push((n, t.shape().to_vec(), Role::Buffer));
        }
        let (model_entries, extra) = meta
            .tensors
            .split_at(expected.len().min(meta.tensors.len()));
        if model_entries.len() != expected.len()
            || model_entries
                .iter()
                .zip(&expected)
                .any(|(e, (n, s, r))| (&e.name, &e.shape, e.role) != (n, s, *r))
        {
            return Err(corrupt(
                "tensor manifest does not match the block layout".into(),
            ));
        }
        let loaded = model_entries
            .iter()
            .map(&mut read)
            .collect::<Result<Vec<_>>>()?;
        let n_params = model.params().len();
        for (slot, t) in model.params_mut().into_iter().zip(&loaded[..n_params]) {
            *slot = t.clone();
        }
        for (slot, t) in model.buffers_mut().into_iter().zip(&loaded[n_params..]) {
            *slot = t.clone();
        }

        let mut head = None;
        let mut velocity = Vec::new();
        for e in extra {
            match e.role {
                Role::Head if head.is_none() && velocity.is_empty() => {
                    head = Some(ClassifierHead {
                        class_weights: read(e)?,
                    })
                }
                Role::Velocity => velocity.push(read(e)?),
                _ => return Err(corrupt(format!("unexpected tensor {}", e.name))),
            }
        }
        if meta.optimizer_state == velocity.is_empty() {
            return Err(corrupt(
                "optimizer_state flag disagrees with the manifest".into(),
            ));
        }
        Ok(Self {
            epoch: meta.epoch,
            schedule: meta.schedule,
            metrics: meta.metrics,
            model,
            head,
            velocity: meta
                .optimizer_state
                .then_some(Velocity { buffers: velocity }),
        })
    }
}

/// Validates the header and splits metadata from payload.
fn split(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.into());
    if bytes.len() < HEADER_LEN {
        return Err(corrupt("file shorter than the header"));
    }
    if bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[HEADER_LEN..];
    match usize::try_from(meta_len) {
        Ok(n) if n <= rest.len() => Ok(rest.split_at(n)),
        _ => Err(corrupt("metadata runs past the end of the file")),
    }
}

/// Reads only the metadata block.
pub fn read_metadata(path: &Path) -> Result<Metadata> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, _) = split(&bytes)?;
    serde_json::from_slice(meta).map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Model<f32> {
        let arch = ArchConfig::mobilefacenet()
            .with_width(0.25)
            .with_input_size(28);
        Model::build(&arch, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let model = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = ClassifierHead::new(5, 512, &mut rng);
        let mut buffers: Vec<Tensor<f32>> = model.params().into_iter().cloned().collect();
        buffers.push(head.class_weights.clone());
        let ckpt = Checkpoint {
            epoch: 7,
            head: Some(head),
            velocity: Some(Velocity { buffers }),
            ..Checkpoint::inference(model)
        };
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lwfr");
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
        assert!(read_metadata(&path).unwrap().optimizer_state);
    }

    #[test]
    fn payload_size_matches_counts() {
        let model = tiny();
        let expect =
            4 * (model.count_params() + model.buffers().iter().map(|t| t.len()).sum::<usize>());
        let bytes = Checkpoint::inference(model.clone()).to_bytes();
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - HEADER_LEN - meta_len, expect);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bare = ConvUnit::<f32>::init(ConvSpec::new(3, 8, 3, 1), false, false, &mut rng);
        let m = Model::from_blocks(ArchConfig::default(), vec![Block::Unit(bare)]);
        let bytes = Checkpoint::inference(m.clone()).to_bytes();
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - HEADER_LEN - meta_len, 4 * m.count_params());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::inference(tiny()).to_bytes();
        let reject =
            |b: &[u8]| matches!(Checkpoint::from_bytes(b), Err(Error::CorruptCheckpoint(_)));
        assert!(reject(&bytes[..bytes.len() - 1]));
        assert!(reject(&bytes[..10]));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(reject(&bad));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(reject(&bad));
        let mut bad = bytes.clone();
        bad[20] = b'{';
        assert!(reject(&bad));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(reject(&long));
    }
}
