//! Minimal CPU neural-network engine: dense tensors, layer kernels with
//! hand-written gradients, the detector model, Adam and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod tensor;

use std::path::PathBuf;

use thiserror::Error;

use crate::spectral::RepresentationKind;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use model::{
    model_backward, model_forward, model_logits, Architecture, BatchGradients, ModelParams,
    ParamSet,
};
pub use tensor::{gemm, Real, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("representation mismatch: model takes {model}, input is {input}")]
    RepresentationMismatch {
        model: RepresentationKind,
        input: RepresentationKind,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{labels} labels for a batch of {batch}")]
    LabelLength { labels: usize, batch: usize },
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {found}")]
    UnsupportedVersion { path: PathBuf, found: u32 },
    #[error("{path}: checkpoint truncated or corrupted: {detail}")]
    Corrupted { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
