//! Long-context analysis toolkit for RoPE transformers.
//!
//! * [`rope`]: rotary frequency algebra and trained-offset coverage.
//! * [`scaling`]: NTK critical dimension, scaling factor and extrapolation bound.
//! * [`mdlm`]: a small transformer testbed with a causal and a masked-diffusion mode.
//! * [`niah`]: needle-in-a-haystack generation, grid evaluation, window fit.
//! * [`probe`]: Q/K state capture, 2D projection and a distribution-shift statistic.

pub mod corpus;
pub mod error;
pub mod mdlm;
pub mod niah;
pub mod par;
pub mod probe;
pub mod rope;
pub mod scaling;
pub mod seeding;

pub use error::{Error, Result};
pub use rope::{AttentionMode, FreqTable, RopeConfig};
pub use scaling::ScalingReport;
