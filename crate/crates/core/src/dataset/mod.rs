//! Manifests, deterministic splits, snippet sampling and preprocessing.

pub mod augment;
pub mod manifest;
pub mod sampler;

use std::path::PathBuf;

use thiserror::Error;

use crate::audio_io::AudioError;
use crate::spectral::SpectralError;

pub use augment::{augment, butterworth_lowpass, filtfilt, plain_mono, Preprocess, CUTOFF_HZ};
pub use manifest::{assign_splits, build_manifest, DatasetManifest, ManifestEntry, Split};
pub use sampler::{
    assemble, derive_seed, plan_eval_set, plan_training_batch, prepare_clip, read_excerpt, render,
    sample_batch, snippet_samples, snippet_seconds, ItemPlan, Provenance, SnippetBatch,
    EVAL_EXCERPT, EVAL_GUARD_BEFORE, REAL, SNIPPET_SECONDS, TIME_FRAMES,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("found {found} readable tracks, need at least {need}")]
    TooFewTracks { found: usize, need: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("decoder '{0}' is not registered in the manifest")]
    UnknownDecoder(String),
    #[error("no usable tracks in the {0} split")]
    EmptySplit(manifest::Split),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}
