use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::load_checkpoint;
use super::config::format_stage_table;
use crate::error::Result;
use crate::zoo::{mobilefacenet_table, Model};

/// Published parameter counts of the two reference configurations.
const REFERENCE_PARAMS: [(f64, usize); 2] = [(1.0, 1_100_000), (2.0, 2_100_000)];

/// Static statistics of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub params: usize,
    pub flops: u64,
    pub size_mb: f64,
    pub input_size: (usize, usize),
    pub embedding_dim: usize,
    pub width_mult: f64,
    pub blocks: usize,
    pub stage_table: String,
    /// Published count for this configuration, if it is a reference one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_params: Option<usize>,
    /// `params − reference_params` relative to `reference_params`, in percent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_gap_pct: Option<f64>,
}

impl ModelReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn model_report(model: &Model<f32>) -> Result<ModelReport> {
    let arch = &model.arch;
    let params = model.count_params();
    let is_reference_table = arch.stage_table == mobilefacenet_table()
        && arch.embedding_dim == 512
        && arch.channel_override.is_none()
        && !model.blocks.is_empty();
    let reference_params = REFERENCE_PARAMS
        .iter()
        .find(|(w, _)| is_reference_table && *w == arch.width_mult)
        .map(|&(_, p)| p);
    Ok(ModelReport {
        params,
        flops: model.count_flops(arch.input_size)?,
        size_mb: model.size_mb(),
        input_size: arch.input_size,
        embedding_dim: arch.embedding_dim,
        width_mult: arch.width_mult,
        blocks: model.blocks.len(),
        stage_table: format_stage_table(&arch.stage_table),
        reference_params,
        reference_gap_pct: reference_params.map(|r| 100.0 * (params as f64 - r as f64) / r as f64),
    })
}

pub fn report(model_path: &Path) -> Result<ModelReport> {
    model_report(&load_checkpoint(model_path)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::ArchConfig;

    #[test]
    fn empty_model_reports_zeros() {
        let r = model_report(&Model::from_blocks(ArchConfig::default(), Vec::new())).unwrap();
        assert_eq!((r.params, r.flops, r.size_mb), (0, 0, 0.0));
        assert_eq!(r.reference_params, None);
    }

    #[test]
    fn baseline_is_near_its_reference() {
        let r = model_report(&Model::build(&ArchConfig::mobilefacenet(), 0).unwrap()).unwrap();
        assert_eq!(r.reference_params, Some(1_100_000));
        assert!(r.reference_gap_pct.unwrap().abs() <= 10.0);
    }
}
