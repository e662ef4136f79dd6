//! Identity-labelled image datasets.
//!
//! On disk a dataset is a directory with one sub-directory per integer
//! identity id holding that identity's images, plus an optional
//! `subgroups.tsv` manifest of `identity_id<TAB>tag` lines.

mod preprocess;
mod sampler;
mod synth;

pub use preprocess::{decode, normalize_pixel, preprocess, DEFAULT_IMAGE_SIZE, PIXEL_BOUND};
pub use sampler::{sample_subset, SamplerConfig};
pub use synth::{synth_dataset, synth_dataset_with, SynthConfig, SYNTH_TAGS};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "subgroups.tsv";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone)]
pub enum ImageSource {
    Path(PathBuf),
    Pixels(Arc<RgbImage>),
}

impl ImageSource {
    pub fn load(&self) -> Result<Arc<RgbImage>> {
        match self {
            ImageSource::Path(p) => decode(p).map(Arc::new),
            ImageSource::Pixels(img) => Ok(Arc::clone(img)),
        }
    }
}

impl PartialEq for ImageSource {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ImageSource::Path(a), ImageSource::Path(b)) => a == b,
            (ImageSource::Pixels(a), ImageSource::Pixels(b)) => {
                a.dimensions() == b.dimensions() && a.as_raw() == b.as_raw()
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub source: ImageSource,
    pub identity_id: usize,
    pub tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityDataset {
    records: Vec<Record>,
    identity_index: BTreeMap<usize, Vec<usize>>,
    tag_set: BTreeSet<String>,
}

impl IdentityDataset {
    /// Builds the identity index. The tag set is the set of tags in use;
    /// every record of an identity must carry the same tag.
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let mut identity_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut tags: BTreeMap<usize, &Option<String>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            identity_index.entry(r.identity_id).or_default().push(i);
            if let Some(prev) = tags.insert(r.identity_id, &r.tag) {
                if prev != &r.tag {
                    return Err(Error::Data(format!(
                        "identity {} has conflicting subgroup tags",
                        r.identity_id
                    )));
                }
            }
        }
        let tag_set = records.iter().filter_map(|r| r.tag.clone()).collect();
        Ok(Self {
            records,
            identity_index,
            tag_set,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn identity_index(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.identity_index
    }

    pub fn num_identities(&self) -> usize {
        self.identity_index.len()
    }

    pub fn identities(&self) -> impl Iterator<Item = usize> + '_ {
        self.identity_index.keys().copied()
    }

    pub fn tag_set(&self) -> &BTreeSet<String> {
        &self.tag_set
    }

    pub fn tag_of(&self, identity: usize) -> Option<&str> {
        let first = *self.identity_index.get(&identity)?.first()?;
        self.records[first].tag.as_deref()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.identity_id).collect()
    }

    /// Keeps the given records (in the given order) without re-indexing ids.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }

    /// Splits off the last `per_id` records of every identity. Identities
    /// with no more than `per_id` records stay entirely in the first part.
    pub fn split_holdout(&self, per_id: usize) -> Result<(Self, Self)> {
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for idx in self.identity_index.values() {
            let cut = if idx.len() > per_id {
                idx.len() - per_id
            } else {
                idx.len()
            };
            keep.extend_from_slice(&idx[..cut]);
            held.extend_from_slice(&idx[cut..]);
        }
        keep.sort_unstable();
        held.sort_unstable();
        Ok((self.select(&keep)?, self.select(&held)?))
    }

    /// Decodes and preprocesses the given records into an `(N, 3, size, size)` batch.
    pub fn batch(&self, indices: &[usize], size: usize) -> Result<Tensor<f32>> {
        let items: Vec<Result<Tensor<f32>>> = exec::map_range(indices.len(), |i| {
            let img = self.records[indices[i]].source.load()?;
            preprocess(&img, size)
        });
        let items = items.into_iter().collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<f32>> = items.iter().collect();
        Tensor::stack(&refs)
    }

    /// Preprocesses every record once, in record order.
    pub fn preprocess_all(&self, size: usize) -> Result<Vec<Tensor<f32>>> {
        exec::map_range(self.records.len(), |i| {
            let img = self.records[i].source.load()?;
            preprocess(&img, size)
        })
        .into_iter()
        .collect()
    }

    /// Reads the directory layout. Records are ordered by identity id, then
    /// file name; files without an image extension are ignored.
    pub fn load_dir(root: &Path) -> Result<Self> {
        let tags = match fs::read_to_string(root.join(MANIFEST_NAME)) {
            Ok(text) => parse_manifest(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(Error::io(root.join(MANIFEST_NAME), e)),
        };
        let mut dirs = BTreeMap::new();
        for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            if !entry
                .file_type()
                .map_err(|e| Error::io(entry.path(), e))?
                .is_dir()
            {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let id: usize = name.parse().map_err(|_| {
                Error::Data(format!("identity directory {name:?} is not an integer id"))
            })?;
            if dirs.insert(id, entry.path()).is_some() {
                return Err(Error::Data(format!("identity {id} appears twice")));
            }
        }
        if let Some(id) = tags.keys().find(|id| !dirs.contains_key(id)) {
            return Err(Error::Data(format!("manifest tags unknown identity {id}")));
        }
        let mut records = Vec::new();
        for (id, dir) in dirs {
            let mut files = Vec::new();
            for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let path = entry.map_err(|e| Error::io(&dir, e))?.path();
                if path.is_file() && has_image_extension(&path) {
                    files.push(path);
                }
            }
            files.sort();
            records.extend(files.into_iter().map(|path| Record {
                source: ImageSource::Path(path),
                identity_id: id,
                tag: tags.get(&id).cloned(),
            }));
        }
        if records.is_empty() {
            return Err(Error::Data(format!("no images under {}", root.display())));
        }
        Self::new(records)
    }

    /// Writes the directory layout. In-memory images become numbered PNG
    /// files; file-backed records are copied under their original names.
    /// Returns the written path of every record, in record order.
    pub fn save_dir(&self, root: &Path) -> Result<Vec<PathBuf>> {
        let mut written = vec![PathBuf::new(); self.records.len()];
        for (&id, idx) in &self.identity_index {
            let dir = root.join(id.to_string());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (k, &i) in idx.iter().enumerate() {
                match &self.records[i].source {
                    ImageSource::Pixels(img) => {
                        let path = dir.join(format!("{k:05}.png"));
                        img.save(&path).map_err(|e| Error::DecodeError {
                            path: path.display().to_string(),
                            reason: e.to_string(),
                        })?;
                        written[i] = path;
                    }
                    ImageSource::Path(src) => {
                        let name = src.file_name().ok_or_else(|| {
                            Error::Data(format!("record path {} has no file name", src.display()))
                        })?;
                        let path = dir.join(name);
                        fs::copy(src, &path).map_err(|e| Error::io(src, e))?;
                        written[i] = path;
                    }
                }
            }
        }
        let manifest: String = self
            .identities()
            .filter_map(|id| self.tag_of(id).map(|t| format!("{id}\t{t}\n")))
            .collect();
        if !manifest.is_empty() {
            let path = root.join(MANIFEST_NAME);
            fs::write(&path, manifest).map_err(|e| Error::io(path, e))?;
        }
        Ok(written)
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Parses `identity_id<TAB>tag` lines. Blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<BTreeMap<usize, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.split('\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = || {
            Error::Data(format!(
                "{MANIFEST_NAME} line {}: expected `id<TAB>tag`",
                n + 1
            ))
        };
        let (id, tag) = line.split_once('\t').ok_or_else(bad)?;
        let id: usize = id.parse().map_err(|_| bad())?;
        if tag.is_empty() || tag.contains('\t') {
            return Err(bad());
        }
        if out.insert(id, tag.to_string()).is_some() {
            return Err(Error::Data(format!(
                "{MANIFEST_NAME}: identity {id} tagged twice"
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, v: u8, tag: Option<&str>) -> Record {
        Record {
            source: ImageSource::Pixels(Arc::new(RgbImage::from_pixel(
                4,
                4,
                image::Rgb([v, v, v]),
            ))),
            identity_id: id,
            tag: tag.map(str::to_string),
        }
    }

    #[test]
    fn index_and_conflicting_tags() {
        let ds =
            IdentityDataset::new(vec![rec(3, 0, None), rec(1, 1, None), rec(3, 2, None)]).unwrap();
        assert_eq!(ds.identity_index()[&3], vec![0, 2]);
        assert_eq!(ds.num_identities(), 2);
        assert!(IdentityDataset::new(vec![rec(0, 0, Some("A")), rec(0, 1, Some("B"))]).is_err());
    }

    #[test]
    fn holdout_split_takes_the_tail() {
        let ds = IdentityDataset::new((0..6).map(|i| rec(i % 2, i as u8, None)).collect()).unwrap();
        let (train, held) = ds.split_holdout(1).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(
            held.records(),
            &[ds.records()[4].clone(), ds.records()[5].clone()]
        );
    }

    #[test]
    fn manifest_format() {
        let m = parse_manifest("0\tA\n12\tB\n").unwrap();
        assert_eq!(m[&12], "B");
        assert!(parse_manifest("0 A\n").is_err());
        assert!(parse_manifest("x\tA\n").is_err());
        assert!(parse_manifest("0\tA\n0\tB\n").is_err());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = IdentityDataset::new(vec![
            rec(0, 10, Some("A")),
            rec(0, 20, Some("A")),
            rec(7, 30, Some("B")),
        ])
        .unwrap();
        let written = ds.save_dir(dir.path()).unwrap();
        assert_eq!(written[2], dir.path().join("7/00000.png"));
        assert_eq!(
            fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap(),
            "0\tA\n7\tB\n"
        );
        let back = IdentityDataset::load_dir(dir.path()).unwrap();
        assert_eq!(back.labels(), vec![0, 0, 7]);
        assert_eq!(back.tag_of(7), Some("B"));
        for (a, b) in ds.records().iter().zip(back.records()) {
            assert_eq!(
                a.source.load().unwrap().as_raw(),
                b.source.load().unwrap().as_raw()
            );
        }
    }

    #[test]
    fn bad_layouts_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("alice")).unwrap();
        assert!(matches!(
            IdentityDataset::load_dir(dir.path()),
            Err(Error::Data(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            IdentityDataset::load_dir(dir.path()),
            Err(Error::Data(_))
        ));
    }
}
