//! Verification, identification and bias metrics.

mod protocols;

pub use protocols::{
    best_threshold, cosine_similarity, fold_ranges, rank_k, subgroup_stats, tar_at_far,
    verify_10fold, verify_folds, FoldReport, SubgroupStats, DEFAULT_FAR_LEVELS, DEFAULT_FOLDS,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub genuine: bool,
}

/// Ordered verification pairs over some indexed set of images. Folds are
/// contiguous runs of this order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairList {
    pairs: Vec<Pair>,
    fold_count: usize,
}

impl PairList {
    pub fn new(pairs: Vec<Pair>, fold_count: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("empty pair list".into()));
        }
        if fold_count < 2 {
            return Err(Error::InvalidParams(format!(
                "need at least 2 folds, got {fold_count}"
            )));
        }
        Ok(Self { pairs, fold_count })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn fold_count(&self) -> usize {
        self.fold_count
    }

    pub fn labels(&self) -> Vec<bool> {
        self.pairs.iter().map(|p| p.genuine).collect()
    }

    /// Builds pairs over items with the given identity labels: up to
    /// `genuine` same-identity pairs and `impostor` cross-identity pairs, each
    /// drawn uniformly without replacement, in shuffled order. With `tags`,
    /// impostor pairs only join identities that share a tag.
    pub fn sample(
        labels: &[usize],
        tags: Option<&[Option<String>]>,
        genuine: usize,
        impostor: usize,
        seed: u64,
    ) -> Result<Self> {
        if tags.is_some_and(|t| t.len() != labels.len()) {
            return Err(Error::shape("one tag per item expected"));
        }
        let mut same = Vec::new();
        let mut cross = Vec::new();
        for a in 0..labels.len() {
            for b in a + 1..labels.len() {
                if labels[a] == labels[b] {
                    same.push(Pair {
                        a,
                        b,
                        genuine: true,
                    });
                } else if tags.is_none_or(|t| t[a].is_some() && t[a] == t[b]) {
                    cross.push(Pair {
                        a,
                        b,
                        genuine: false,
                    });
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut take = |pool: Vec<Pair>, n: usize| -> Vec<Pair> {
            if n >= pool.len() {
                return pool;
            }
            let mut idx = index::sample(&mut rng, pool.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| pool[i]).collect()
        };
        let mut pairs = take(same, genuine);
        pairs.extend(take(cross, impostor));
        pairs.shuffle(&mut rng);
        Self::new(pairs, DEFAULT_FOLDS)
    }

    /// Cosine score of every pair against rows of `embeddings`.
    pub fn scores<T: Real>(&self, embeddings: &Tensor<T>) -> Result<Vec<f64>> {
        let (n, d) = embeddings.dims2()?;
        if let Some(p) = self.pairs.iter().find(|p| p.a >= n || p.b >= n) {
            return Err(Error::Data(format!(
                "pair ({}, {}) outside {n} embeddings",
                p.a, p.b
            )));
        }
        let row = |i: usize| &embeddings.data()[i * d..(i + 1) * d];
        exec::map_range(self.pairs.len(), |i| {
            cosine_similarity(row(self.pairs[i].a), row(self.pairs[i].b))
        })
        .into_iter()
        .collect()
    }

    /// Splits scores into genuine and impostor sets.
    pub fn split_scores(&self, scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gen = Vec::new();
        let mut imp = Vec::new();
        for (p, &s) in self.pairs.iter().zip(scores) {
            if p.genuine {
                gen.push(s)
            } else {
                imp.push(s)
            }
        }
        (gen, imp)
    }

    /// Renders `path_a<TAB>path_b<TAB>{0|1}` lines.
    pub fn to_pair_file(&self, paths: &[PathBuf]) -> String {
        self.pairs
            .iter()
            .map(|p| {
                format!(
                    "{}\t{}\t{}\n",
                    paths[p.a].display(),
                    paths[p.b].display(),
                    u8::from(p.genuine)
                )
            })
            .collect()
    }
}

/// A parsed pair file: the distinct image paths in first-seen order and the
/// pairs indexing them.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFile {
    pub paths: Vec<PathBuf>,
    pub list: PairList,
}

/// Parses `path_a<TAB>path_b<TAB>{0|1}` lines; relative paths are resolved
/// against `base`. Blank lines are skipped.
pub fn parse_pair_file(text: &str, base: &Path) -> Result<PairFile> {
    let mut paths = Vec::new();
    let mut slot: BTreeMap<PathBuf, usize> = BTreeMap::new();
    let mut intern = |p: &str| {
        let path = base.join(p);
        *slot.entry(path.clone()).or_insert_with(|| {
            paths.push(path);
            paths.len() - 1
        })
    };
    let mut pairs = Vec::new();
    for (n, line) in text.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let genuine = match fields.as_slice() {
            [a, b, flag] if !a.is_empty() && !b.is_empty() => match *flag {
                "1" => true,
                "0" => false,
                _ => {
                    return Err(Error::Data(format!(
                        "pair line {}: flag must be 0 or 1",
                        n + 1
                    )))
                }
            },
            _ => {
                return Err(Error::Data(format!(
                    "pair line {}: expected 3 tab-separated fields",
                    n + 1
                )))
            }
        };
        pairs.push(Pair {
            a: intern(fields[0]),
            b: intern(fields[1]),
            genuine,
        });
    }
    let list = PairList::new(pairs, DEFAULT_FOLDS)?;
    Ok(PairFile { paths, list })
}

/// Parses `tag<TAB>accuracy` lines.
pub fn parse_subgroup_accuracies(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = || {
            Error::Data(format!(
                "subgroup line {}: expected `tag<TAB>accuracy`",
                n + 1
            ))
        };
        let (tag, acc) = line.split_once('\t').ok_or_else(bad)?;
        let acc: f64 = acc.trim().parse().map_err(|_| bad())?;
        if tag.is_empty() || out.insert(tag.to_string(), acc).is_some() {
            return Err(bad());
        }
    }
    Ok(out)
}

/// Per-subgroup verification accuracy over pairs whose two items share a tag.
/// Subgroups with fewer pairs than folds are skipped.
pub fn subgroup_accuracies(
    list: &PairList,
    scores: &[f64],
    tags: &[Option<String>],
) -> Result<BTreeMap<String, f64>> {
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for (p, &s) in list.pairs().iter().zip(scores) {
        if let (Some(a), Some(b)) = (&tags[p.a], &tags[p.b]) {
            if a == b {
                let g = groups.entry(a).or_default();
                g.0.push(s);
                g.1.push(p.genuine);
            }
        }
    }
    let mut out = BTreeMap::new();
    for (tag, (s, l)) in groups {
        if s.len() >= list.fold_count() {
            out.insert(tag.to_string(), verify_10fold(&s, &l, list.fold_count())?.0);
        }
    }
    Ok(out)
}

/// Benchmark summary. Metrics that were not measured are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_std: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub tar_at_far: Vec<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank5: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub subgroup_accuracies: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subgroup_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subgroup_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ser: Option<f64>,
    pub flops: u64,
    pub params: usize,
    pub size_mb: f64,
}

impl EvalReport {
    pub fn with_subgroups(mut self, accuracies: BTreeMap<String, f64>) -> Result<Self> {
        if accuracies.len() >= 2 {
            match subgroup_stats(&accuracies) {
                Ok(s) => {
                    self.subgroup_mean = Some(s.mean);
                    self.subgroup_std = Some(s.std);
                    self.ser = Some(s.ser);
                }
                Err(Error::SerUndefined) => {
                    let (mean, std) =
                        protocols::mean_std(&accuracies.values().copied().collect::<Vec<_>>());
                    self.subgroup_mean = Some(mean);
                    self.subgroup_std = Some(std);
                }
                Err(e) => return Err(e),
            }
        }
        self.subgroup_accuracies = accuracies;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_file_round_trip() {
        let text = "a/1.png\tb/1.png\t1\na/1.png\tc/2.png\t0\n";
        let pf = parse_pair_file(text, Path::new("/data")).unwrap();
        assert_eq!(pf.paths.len(), 3);
        assert_eq!(pf.list.labels(), vec![true, false]);
        assert_eq!(
            pf.list.pairs()[1],
            Pair {
                a: 0,
                b: 2,
                genuine: false
            }
        );
        assert_eq!(
            pf.list.to_pair_file(&pf.paths),
            text.replace("a/", "/data/a/")
                .replace("b/", "/data/b/")
                .replace("c/", "/data/c/")
        );
        assert!(parse_pair_file("x\ty\t2\n", Path::new("")).is_err());
        assert!(parse_pair_file("x y 1\n", Path::new("")).is_err());
        assert!(parse_pair_file("\n", Path::new("")).is_err());
    }

    #[test]
    fn subgroup_file() {
        let m = parse_subgroup_accuracies("Asian\t94.5\nIndian\t96\n").unwrap();
        assert_eq!(m["Asian"], 94.5);
        assert!(parse_subgroup_accuracies("Asian 94\n").is_err());
        assert!(parse_subgroup_accuracies("A\t1\nA\t2\n").is_err());
    }

    #[test]
    fn sampled_pairs() {
        let labels: Vec<usize> = (0..12).map(|i| i / 4).collect();
        let tags: Vec<Option<String>> = labels
            .iter()
            .map(|&l| Some(if l < 2 { "A" } else { "B" }.into()))
            .collect();
        let list = PairList::sample(&labels, Some(&tags), 100, 100, 3).unwrap();
        let (g, i): (Vec<Pair>, Vec<Pair>) = list.pairs().iter().partition(|p| p.genuine);
        assert_eq!(g.len(), 18);
        assert_eq!(i.len(), 16);
        assert!(i.iter().all(|p| labels[p.a] < 2 && labels[p.b] < 2));
        assert_eq!(
            list,
            PairList::sample(&labels, Some(&tags), 100, 100, 3).unwrap()
        );
        let few = PairList::sample(&labels, None, 5, 7, 3).unwrap();
        assert_eq!(few.pairs().len(), 12);
    }

    #[test]
    fn scoring_and_subgroups() {
        let emb = Tensor::new(vec![3, 2], vec![1.0f32, 0.0, 1.0, 0.1, 0.0, 1.0]).unwrap();
        let list = PairList::new(
            vec![
                Pair {
                    a: 0,
                    b: 1,
                    genuine: true,
                },
                Pair {
                    a: 0,
                    b: 2,
                    genuine: false,
                },
            ],
            2,
        )
        .unwrap();
        let s = list.scores(&emb).unwrap();
        assert!(s[0] > 0.99 && s[1] == 0.0);
        assert_eq!(list.split_scores(&s), (vec![s[0]], vec![s[1]]));
        let tags = vec![Some("A".to_string()); 3];
        // each fold is scored by a threshold fitted on the other class alone
        assert_eq!(subgroup_accuracies(&list, &s, &tags).unwrap()["A"], 0.0);
    }

    #[test]
    fn report_json_omits_missing_metrics() {
        let r = EvalReport {
            params: 3,
            ..Default::default()
        };
        let json = r.to_json();
        assert!(json.contains("\"params\": 3") && !json.contains("rank1"));
        let acc = [("A".to_string(), 90.0), ("B".to_string(), 100.0)]
            .into_iter()
            .collect();
        let r = r.with_subgroups(acc).unwrap();
        assert_eq!((r.subgroup_mean, r.ser), (Some(95.0), None));
    }
}
