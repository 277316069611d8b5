//! Structured dropout with complementary sub-model masks and mutual
//! learning.
//!
//! - [`gamma`]: block-center probability analytics and Monte Carlo checks.
//! - [`mask`]: mask samplers for single models and sub-model pairs.
//! - [`loss`]: the two-sub-model objective and its gradients.
//! - [`nn`]: CPU convolution, dense, pooling and activation kernels.
//! - [`train`]: a desk-scale CNN trainer and the method comparison harness.

pub mod error;
pub mod gamma;
pub mod loss;
pub mod mask;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use gamma::{BlockGeometry, GammaMode, MaskStatsReport};
pub use loss::{rblock_loss, LogitsPair, LossBreakdown, LossWeights, RBlockLoss};
pub use mask::{CenterRegion, DropMethod, DropSpec, KeepMask, MaskPair, MaskShape, Schedule, StepMasks};
pub use rng::RngStream;
pub use tensor::Tensor4;
