//! Skeleton action recognition with spatial-temporal decoupled contrastive
//! learning.
//!
//! A graph-temporal encoder maps a skeleton sequence to a `[J, T, C]` feature
//! map that feeds a linear classifier. During training a decoupling head
//! projects the same map to a frame-invariant spatial embedding and a
//! joint-invariant temporal embedding, each contrasted against its own memory
//! bank. Inference touches the encoder and classifier only.
//!
//! Everything runs on a small reverse-mode autodiff tape ([`tensor::Tape`]).

pub mod checkpoint;
pub mod config;
pub mod contrast;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod param;
pub mod probe;
pub mod stfd;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{RunConfig, RunManifest};
pub use contrast::{
    contrast_step, info_nce, sample_contrast, BankKind, ContrastConfig, ContrastError, ContrastSample, DualBank,
    LossForm, MemoryBank, SamplerRng,
};
pub use data::{generate_synthetic, load_dataset, write_dataset, DataError, DataFormat, Dataset, SkeletonSequence, SyntheticSpec};
pub use encoder::{EncoderConfig, EncoderKind, SkeletonEncoder};
pub use error::{Error, Result};
pub use model::{Model, ModelSpec};
pub use param::Param;
pub use stfd::{decouple, DecoupledPair, StfdConfig, StfdParams};
pub use tensor::{OpKind, Real, Tape, Tensor, TensorError, Var};
pub use train::{evaluate, fit, EvalReport, FitOutcome, StepRecord, TrainConfig, Trainer};
