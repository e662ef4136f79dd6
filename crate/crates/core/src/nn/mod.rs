//! Deterministic tensor ops for the MobileFaceNet layer set, with hand-written
//! gradients and a finite-difference checker.

mod batchnorm;
mod conv;
pub mod gradcheck;
mod normalize;
mod prelu;

use serde::{Deserialize, Serialize};

pub use batchnorm::{
    batchnorm, batchnorm_backward, batchnorm_forward, batchnorm_forward_with, BatchNormState,
    BnCache, BN_EPS, BN_MOMENTUM,
};
pub use conv::{conv2d, conv2d_backward, ConvSpec};
pub use gradcheck::{gradient_check, gradient_check_at, GradTarget};
pub use normalize::{l2_normalize, l2_normalize_backward, MIN_NORM};
pub(crate) use normalize::{normalize_row_backward, row_norm};
pub use prelu::{prelu, prelu_backward, PReLUState, PRELU_INIT_SLOPE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Infer,
}
