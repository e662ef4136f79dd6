use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{IdentityDataset, Record};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_identities: usize,
    pub min_per_id: usize,
    pub max_per_id: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(num_identities: usize, seed: u64) -> Self {
        Self {
            num_identities,
            min_per_id: 30,
            max_per_id: 50,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_per_id < 1 || self.min_per_id > self.max_per_id {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= min_per_id <= max_per_id, got {} and {}",
                self.min_per_id, self.max_per_id
            )));
        }
        Ok(())
    }
}

/// Draws `num_identities` identities uniformly from those owning at least
/// `min_per_id` images, then a uniform number of their images in
/// `[min_per_id, min(max_per_id, available)]`. Selected identities keep their
/// relative order and are renumbered `0..num_identities`; images keep their
/// original order.
pub fn sample_subset(ds: &IdentityDataset, cfg: &SamplerConfig) -> Result<IdentityDataset> {
    cfg.validate()?;
    let eligible: Vec<(&usize, &Vec<usize>)> = ds
        .identity_index()
        .iter()
        .filter(|(_, idx)| idx.len() >= cfg.min_per_id)
        .collect();
    if eligible.len() < cfg.num_identities {
        return Err(Error::InsufficientIdentities {
            eligible: eligible.len(),
            requested: cfg.num_identities,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chosen = index::sample(&mut rng, eligible.len(), cfg.num_identities).into_vec();
    chosen.sort_unstable();
    let mut records = Vec::new();
    for (new_id, &e) in chosen.iter().enumerate() {
        let idx = eligible[e].1;
        let hi = cfg.max_per_id.min(idx.len());
        let count = rng.random_range(cfg.min_per_id..=hi);
        let mut pick = index::sample(&mut rng, idx.len(), count).into_vec();
        pick.sort_unstable();
        records.extend(pick.into_iter().map(|k| Record {
            identity_id: new_id,
            ..ds.records()[idx[k]].clone()
        }));
    }
    IdentityDataset::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageSource;
    use std::path::PathBuf;

    fn toy(ids: usize, per: usize) -> IdentityDataset {
        let records = (0..ids * per)
            .map(|i| Record {
                source: ImageSource::Path(PathBuf::from(format!("{}/{}.png", i / per, i % per))),
                identity_id: i / per,
                tag: None,
            })
            .collect();
        IdentityDataset::new(records).unwrap()
    }

    #[test]
    fn counts_fall_in_range() {
        let ds = toy(50, 10);
        let cfg = SamplerConfig {
            num_identities: 20,
            min_per_id: 5,
            max_per_id: 8,
            seed: 1,
        };
        let out = sample_subset(&ds, &cfg).unwrap();
        assert_eq!(out.num_identities(), 20);
        assert_eq!(
            out.identities().collect::<Vec<_>>(),
            (0..20).collect::<Vec<_>>()
        );
        assert!(out
            .identity_index()
            .values()
            .all(|v| (5..=8).contains(&v.len())));
        assert_eq!(out, sample_subset(&ds, &cfg).unwrap());
    }

    #[test]
    fn taking_everything_is_the_identity() {
        let ds = toy(6, 4);
        let cfg = SamplerConfig {
            num_identities: 6,
            min_per_id: 4,
            max_per_id: 4,
            seed: 9,
        };
        assert_eq!(sample_subset(&ds, &cfg).unwrap(), ds);
    }

    #[test]
    fn ineligible_identities_are_excluded() {
        let mut records = toy(3, 5).records().to_vec();
        records.truncate(12);
        let ds = IdentityDataset::new(records).unwrap();
        let cfg = SamplerConfig {
            num_identities: 3,
            min_per_id: 3,
            max_per_id: 5,
            seed: 0,
        };
        assert!(matches!(
            sample_subset(&ds, &cfg),
            Err(Error::InsufficientIdentities {
                eligible: 2,
                requested: 3
            })
        ));
        let bad = SamplerConfig {
            min_per_id: 6,
            ..cfg
        };
        assert!(matches!(
            sample_subset(&ds, &bad),
            Err(Error::InvalidConfig(_))
        ));
    }
}
