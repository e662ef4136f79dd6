use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_FAR_LEVELS: [f64; 4] = [1e-5, 1e-4, 1e-3, 1e-2];

const ZERO_NORM: f64 = 1e-12;

/// `a·b / (‖a‖‖b‖)` accumulated in f64 and clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    for (row, norm) in [(0, na), (1, nb)] {
        if norm <= ZERO_NORM {
            return Err(Error::ZeroVector { row, norm });
        }
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Contiguous folds over `n` items whose sizes differ by at most one.
pub fn fold_ranges(n: usize, folds: usize) -> Vec<Range<usize>> {
    (0..folds)
        .map(|i| i * n / folds..(i + 1) * n / folds)
        .collect()
}

/// Per-fold outcome of [`verify_folds`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub thresholds: Vec<f64>,
    /// Fold accuracies in percent.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// The accuracy-maximising threshold over `(score, genuine)` samples. A pair
/// is accepted as genuine iff its score is strictly above the threshold.
/// Candidates are −∞, the midpoints between consecutive distinct scores, and
/// +∞; ties go to the smallest candidate.
pub fn best_threshold(samples: &mut [(f64, bool)]) -> f64 {
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut correct: i64 = samples.iter().filter(|s| s.1).count() as i64;
    let (mut best, mut best_t) = (correct, f64::NEG_INFINITY);
    let mut i = 0;
    while i < samples.len() {
        let v = samples[i].0;
        while i < samples.len() && samples[i].0 == v {
            correct += if samples[i].1 { -1 } else { 1 };
            i += 1;
        }
        if correct > best {
            best = correct;
            best_t = match samples.get(i) {
                Some(&(next, _)) => {
                    let mid = v + (next - v) / 2.0;
                    if mid > v && mid < next {
                        mid
                    } else {
                        v
                    }
                }
                None => f64::INFINITY,
            };
        }
    }
    best_t
}

fn accuracy(samples: impl Iterator<Item = (f64, bool)>, threshold: f64) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (s, g) in samples {
        hit += usize::from((s > threshold) == g);
        n += 1;
    }
    100.0 * hit as f64 / n as f64
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// K-fold verification: each fold is scored with the threshold fitted on the
/// remaining folds. Accuracies are percentages; the std is the population one.
pub fn verify_folds(scores: &[f64], labels: &[bool], fold_count: usize) -> Result<FoldReport> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if fold_count < 2 {
        return Err(Error::InvalidParams(format!(
            "need at least 2 folds, got {fold_count}"
        )));
    }
    if scores.len() < fold_count {
        return Err(Error::TooFewPairs {
            pairs: scores.len(),
            folds: fold_count,
        });
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidParams(format!("score {s}")));
    }
    let folds = fold_ranges(scores.len(), fold_count);
    let pairs = || scores.iter().copied().zip(labels.iter().copied());
    let mut thresholds = Vec::with_capacity(fold_count);
    let mut accuracies = Vec::with_capacity(fold_count);
    for fold in &folds {
        let mut train: Vec<(f64, bool)> = pairs()
            .enumerate()
            .filter(|(i, _)| !fold.contains(i))
            .map(|(_, p)| p)
            .collect();
        let t = best_threshold(&mut train);
        thresholds.push(t);
        accuracies.push(accuracy(pairs().skip(fold.start).take(fold.len()), t));
    }
    let (mean, std) = mean_std(&accuracies);
    Ok(FoldReport {
        thresholds,
        accuracies,
        mean,
        std,
    })
}

/// Mean and population std (percent) of 10-fold-style verification accuracy.
pub fn verify_10fold(scores: &[f64], labels: &[bool], fold_count: usize) -> Result<(f64, f64)> {
    verify_folds(scores, labels, fold_count).map(|r| (r.mean, r.std))
}

/// True accept rate at each false accept level. The threshold is the smallest
/// candidate (any observed score, or +∞) whose impostor acceptance rate
/// `#(impostor ≥ t) / I` does not exceed the level; TAR is `#(genuine ≥ t) / G`.
pub fn tar_at_far(
    genuine: &[f64],
    impostor: &[f64],
    far_levels: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if genuine.is_empty() {
        return Err(Error::InvalidParams("no genuine scores".into()));
    }
    if genuine.iter().chain(impostor).any(|s| s.is_nan()) {
        return Err(Error::InvalidParams("NaN score".into()));
    }
    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (gen, imp) = (sorted(genuine), sorted(impostor));
    let mut candidates: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.push(f64::INFINITY);
    let at_least = |v: &[f64], t: f64| v.len() - v.partition_point(|&s| s < t);
    let n_imp = imp.len() as f64;
    far_levels
        .iter()
        .map(|&level| {
            if !(level > 0.0 && level <= 1.0) {
                return Err(Error::InvalidParams(format!("FAR level {level}")));
            }
            if imp.is_empty() || 1.0 / n_imp > level {
                return Err(Error::InsufficientImpostors {
                    level,
                    have: imp.len(),
                });
            }
            let k = candidates.partition_point(|&t| at_least(&imp, t) as f64 / n_imp > level);
            let t = candidates[k];
            Ok((level, at_least(&gen, t) as f64 / gen.len() as f64))
        })
        .collect()
}

/// Rank-k identification rate (percent) of probes against a gallery with one
/// entry per label. Similarity ties rank the lower gallery index first.
pub fn rank_k<T: Real>(
    probes: &Tensor<T>,
    probe_labels: &[usize],
    gallery: &Tensor<T>,
    gallery_labels: &[usize],
    k: usize,
) -> Result<f64> {
    let (p, d) = probes.dims2()?;
    let (g, gd) = gallery.dims2()?;
    if d != gd || p != probe_labels.len() || g != gallery_labels.len() {
        return Err(Error::shape(format!(
            "probes {:?} with {} labels vs gallery {:?} with {} labels",
            probes.shape(),
            probe_labels.len(),
            gallery.shape(),
            gallery_labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidParams("rank k must be at least 1".into()));
    }
    let mut slot = BTreeMap::new();
    for (j, &l) in gallery_labels.iter().enumerate() {
        if slot.insert(l, j).is_some() {
            return Err(Error::InvalidParams(format!(
                "gallery label {l} is not unique"
            )));
        }
    }
    let truth = probe_labels
        .iter()
        .map(|l| slot.get(l).copied().ok_or(Error::LabelNotInGallery(*l)))
        .collect::<Result<Vec<_>>>()?;
    fn row<T: Real>(t: &Tensor<T>, i: usize, d: usize) -> &[T] {
        &t.data()[i * d..(i + 1) * d]
    }
    let hits = exec::map_range(p, |i| -> Result<bool> {
        let sims = (0..g)
            .map(|j| cosine_similarity(row(probes, i, d), row(gallery, j, d)))
            .collect::<Result<Vec<_>>>()?;
        let own = truth[i];
        let ahead = (0..g)
            .filter(|&j| sims[j] > sims[own] || (sims[j] == sims[own] && j < own))
            .count();
        Ok(ahead < k)
    });
    let hits = hits.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(100.0 * hits.iter().filter(|&&h| h).count() as f64 / p as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgroupStats {
    pub mean: f64,
    pub std: f64,
    /// Worst subgroup error over best subgroup error.
    pub ser: f64,
}

/// Mean, population std and skewed error ratio of per-subgroup accuracies (percent).
pub fn subgroup_stats(per_subgroup: &BTreeMap<String, f64>) -> Result<SubgroupStats> {
    if per_subgroup.len() < 2 {
        return Err(Error::InvalidParams(format!(
            "need at least 2 subgroups, got {}",
            per_subgroup.len()
        )));
    }
    let acc: Vec<f64> = per_subgroup.values().copied().collect();
    if let Some(a) = acc.iter().find(|a| !(0.0..=100.0).contains(*a)) {
        return Err(Error::InvalidParams(format!(
            "accuracy {a} outside [0, 100]"
        )));
    }
    let max = acc.iter().copied().fold(f64::MIN, f64::max);
    let min = acc.iter().copied().fold(f64::MAX, f64::min);
    if max == 100.0 {
        return Err(Error::SerUndefined);
    }
    let (mean, std) = mean_std(&acc);
    Ok(SubgroupStats {
        mean,
        std,
        ser: (100.0 - min) / (100.0 - max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_fixtures() {
        assert_eq!(cosine_similarity(&[1.0f32, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0f32, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(
            cosine_similarity(&[1.0f32, 0.0], &[-1.0, 0.0]).unwrap(),
            -1.0
        );
        assert!(matches!(
            cosine_similarity(&[0.0f32, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector { row: 0, .. })
        ));
    }

    #[test]
    fn folds_are_balanced_and_contiguous() {
        let f = fold_ranges(23, 10);
        assert_eq!(f.first().unwrap().start, 0);
        assert_eq!(f.last().unwrap().end, 23);
        assert!(f.windows(2).all(|w| w[0].end == w[1].start));
        let sizes: Vec<usize> = f.iter().map(|r| r.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn perfect_and_single_class_verification() {
        let labels: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
        let scores: Vec<f64> = labels.iter().map(|&g| if g { 0.9 } else { 0.1 }).collect();
        assert_eq!(verify_10fold(&scores, &labels, 10).unwrap(), (100.0, 0.0));
        let all = vec![true; 30];
        let r = verify_folds(&scores[..30], &all, 10).unwrap();
        assert_eq!((r.mean, r.std), (100.0, 0.0));
        assert!(r.thresholds.iter().all(|&t| t == f64::NEG_INFINITY));
        assert!(matches!(
            verify_10fold(&scores[..9], &labels[..9], 10),
            Err(Error::TooFewPairs {
                pairs: 9,
                folds: 10
            })
        ));
    }

    #[test]
    fn tar_fixtures() {
        let r = tar_at_far(&[0.9, 0.8, 0.7, 0.4], &[0.6, 0.5, 0.3, 0.2, 0.1], &[0.2]).unwrap();
        assert_eq!(r, vec![(0.2, 0.75)]);
        let r = tar_at_far(&[0.9, 0.8], &[0.1, 0.2], &[0.5, 1.0]).unwrap();
        assert!(r.iter().all(|&(_, tar)| tar == 1.0));
        let imp: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        assert!(matches!(
            tar_at_far(&[1.0], &imp, &[1e-5]),
            Err(Error::InsufficientImpostors { have: 100, .. })
        ));
        // 49 · (1/49) rounds below one
        let imp: Vec<f64> = (0..49).map(|i| i as f64 / 49.0).collect();
        let r = tar_at_far(&[2.0, 0.5], &imp, &[1.0 / 49.0]).unwrap();
        assert_eq!(r[0].1, 0.5);
    }

    #[test]
    fn rank_fixtures() {
        let g = Tensor::new(vec![3, 3], vec![1.0f32, 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(rank_k(&g, &[4, 5, 6], &g, &[4, 5, 6], 1).unwrap(), 100.0);
        let probe = Tensor::new(vec![1, 4], vec![0.0f32, 0., 0., 1.]).unwrap();
        let gal = Tensor::new(
            vec![3, 4],
            vec![1.0f32, 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.],
        )
        .unwrap();
        assert_eq!(rank_k(&probe, &[2], &gal, &[0, 1, 2], 3).unwrap(), 100.0);
        assert_eq!(rank_k(&probe, &[2], &gal, &[0, 1, 2], 2).unwrap(), 0.0);
        assert!(matches!(
            rank_k(&probe, &[9], &gal, &[0, 1, 2], 1),
            Err(Error::LabelNotInGallery(9))
        ));
    }

    #[test]
    fn subgroup_fixtures() {
        let m = |v: &[f64]| {
            v.iter()
                .enumerate()
                .map(|(i, &a)| (i.to_string(), a))
                .collect()
        };
        let s = subgroup_stats(&m(&[94.0, 96.0, 98.0, 99.0])).unwrap();
        assert!((s.mean - 96.75).abs() < 1e-12);
        assert!((s.std - 1.92029).abs() < 1e-5);
        assert!((s.ser - 6.0).abs() < 1e-12);
        let s = subgroup_stats(&m(&[97.0, 97.0, 97.0])).unwrap();
        assert_eq!((s.std, s.ser), (0.0, 1.0));
        assert!((subgroup_stats(&m(&[99.9, 99.0])).unwrap().ser - 10.0).abs() < 1e-9);
        assert!(matches!(
            subgroup_stats(&m(&[100.0, 90.0])),
            Err(Error::SerUndefined)
        ));
        assert!(subgroup_stats(&m(&[90.0])).is_err());
    }
}
