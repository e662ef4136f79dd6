//! The MobileFaceNet model family: layer tables, width scaling, and
//! parameter / FLOP / size accounting.

mod arch;
mod model;

pub use arch::{mobilefacenet_table, ArchConfig, BlockPlan, StageKind, StageSpec, UnitPlan};
pub use model::{model_size_mb, Block, ConvUnit, Model, ModelGrads, Tape};

/// Builds a model from `config`, deterministic in `seed`.
pub fn build_model(config: &ArchConfig, seed: u64) -> crate::Result<Model<f32>> {
    Model::build(config, seed)
}
