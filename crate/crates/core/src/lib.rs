//! Detection of AI-generated music through decoder fingerprints.

pub mod audio_io;
pub mod dataset;
pub mod eval;
pub mod nn;
pub mod reconstruction;
pub mod robustness;
pub mod spectral;
pub mod training;
