//! Toy transformer testbed: one backbone, a causal and a masked-diffusion
//! mode, training, block-wise diffusion sampling and NLL evaluation.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod params;
pub mod sample;
pub mod train;

pub use checkpoint::{init_model, ModelCheckpoint, TrainMeta};
pub use config::{
    ModelConfig, ModelMode, Remasking, SamplerConfig, TrainHyper, Vocab, DEFAULT_SEED,
    SCHEMA_VERSION,
};
pub use eval::{eval_nll, eval_nll_with};
pub use model::{QkCapture, Rotary, Transformer};
pub use sample::{sample, sample_traced, sample_with_rope, SampleTrace};
pub use train::{train, train_with, TrainOutcome};
