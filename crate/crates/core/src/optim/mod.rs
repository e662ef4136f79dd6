//! SGD with momentum and coupled weight decay, the two-pass SAM wrapper, and
//! the staged + exponential learning-rate schedule.

mod sam;
mod schedule;
mod sgd;

pub use sam::{sam_perturbation, sam_step, SamConfig, SamPass};
pub use schedule::{lr_at, LrSchedule};
pub use sgd::{sgd_step, SgdConfig, Velocity};

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

/// Anything that owns an ordered list of trainable tensors.
pub trait Parameters<T: Real> {
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
}

impl<T: Real> Parameters<T> for crate::zoo::Model<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        crate::zoo::Model::params(self)
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        crate::zoo::Model::params_mut(self)
    }
}

impl<T: Real> Parameters<T> for Vec<Tensor<T>> {
    fn params(&self) -> Vec<&Tensor<T>> {
        self.iter().collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.iter_mut().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Sam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(Self::Sgd),
            "sam" => Some(Self::Sam),
            _ => None,
        }
    }
}
