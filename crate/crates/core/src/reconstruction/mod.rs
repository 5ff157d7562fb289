//! Artificial counterparts of real tracks: GriffinMel, the toy codec, and
//! reconstructions produced elsewhere.

pub mod codec;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{read_wav, resample, wav_info, write_wav, AudioClip, AudioError};
use crate::dataset::DatasetManifest;
use crate::nn::NnError;
use crate::spectral::{griffin_lim, mel_filterbank, stft_samples, SpectralError, StftParams};

pub use codec::{train_toy_codec, CodecTrace, CodecTrainConfig, CompressionLevel, ToyCodec};

pub const GRIFFINMEL_N_FFT: usize = 2048;
pub const GRIFFINMEL_HOP: usize = 512;
pub const DEFAULT_GL_ITERS: usize = 32;
/// Tolerated duration difference for ingested files, in seconds.
pub const EXTERNAL_DURATION_SLACK: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("decoder checkpoint {path} not found")]
    MissingCheckpoint { path: PathBuf },
    #[error("{path}: invalid codec checkpoint: {detail}")]
    BadCheckpoint { path: PathBuf, detail: String },
    #[error("external reconstruction missing for track {track_id}: {path}")]
    MissingExternal { track_id: String, path: PathBuf },
    #[error("external decoder needs a track id")]
    NoTrackId,
    #[error("{path}: duration {got:.3}s differs from the original {expected:.3}s")]
    DurationMismatch {
        path: PathBuf,
        got: f64,
        expected: f64,
    },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("invalid decoder configuration: {0}")]
    InvalidConfig(String),
    #[error("duplicate decoder id {0}")]
    DuplicateId(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum DecoderConfig {
    Griffinmel {
        n_mels: usize,
        #[serde(default = "default_gl_iters")]
        gl_iters: usize,
    },
    Toycodec {
        checkpoint: PathBuf,
        level: CompressionLevel,
    },
    External {
        dir: PathBuf,
        /// Appended to the track id; defaults to `.<decoder id>.wav`.
        #[serde(default)]
        suffix: Option<String>,
    },
}

fn default_gl_iters() -> usize {
    DEFAULT_GL_ITERS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub id: String,
    #[serde(flatten)]
    pub config: DecoderConfig,
}

impl DecoderSpec {
    pub fn griffinmel(n_mels: usize) -> Self {
        Self {
            id: format!("griffinmel-{n_mels}"),
            config: DecoderConfig::Griffinmel {
                n_mels,
                gl_iters: DEFAULT_GL_ITERS,
            },
        }
    }

    pub fn toycodec(checkpoint: impl Into<PathBuf>, level: CompressionLevel) -> Self {
        Self {
            id: format!("toycodec-{level}"),
            config: DecoderConfig::Toycodec {
                checkpoint: checkpoint.into(),
                level,
            },
        }
    }

    pub fn family(&self) -> &'static str {
        match self.config {
            DecoderConfig::Griffinmel { .. } => "griffinmel",
            DecoderConfig::Toycodec { .. } => "toycodec",
            DecoderConfig::External { .. } => "external",
        }
    }

    pub fn validate(&self) -> Result<(), ReconError> {
        if self.id.is_empty() || self.id == crate::dataset::REAL {
            return Err(ReconError::InvalidConfig(format!(
                "invalid decoder id '{}'",
                self.id
            )));
        }
        match &self.config {
            DecoderConfig::Griffinmel { n_mels, gl_iters } => {
                if *n_mels < 2 || *gl_iters == 0 {
                    return Err(ReconError::InvalidConfig(format!(
                        "{}: n_mels must be ≥ 2 and gl_iters ≥ 1",
                        self.id
                    )));
                }
            }
            DecoderConfig::Toycodec { .. } => {}
            DecoderConfig::External { suffix, .. } => {
                if suffix.as_deref().is_some_and(|s| s.contains('/')) {
                    return Err(ReconError::InvalidConfig(format!(
                        "{}: suffix may not contain '/'",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Path of an ingested reconstruction for `track_id`.
    pub fn external_path(&self, track_id: &str) -> Option<PathBuf> {
        match &self.config {
            DecoderConfig::External { dir, suffix } => {
                let suffix = suffix
                    .clone()
                    .unwrap_or_else(|| format!(".{}.wav", self.id));
                Some(dir.join(format!("{track_id}{suffix}")))
            }
            _ => None,
        }
    }
}

pub fn check_unique_ids(specs: &[DecoderSpec]) -> Result<(), ReconError> {
    let mut seen = BTreeSet::new();
    for s in specs {
        s.validate()?;
        if !seen.insert(s.id.as_str()) {
            return Err(ReconError::DuplicateId(s.id.clone()));
        }
    }
    Ok(())
}

/// Mel spectrogram followed by Griffin-Lim, per channel. The signal is
/// zero-padded so every sample is covered by full frames, and the output is
/// cut back to the input length.
pub fn griffinmel_samples(
    x: &[f32],
    sample_rate: u32,
    n_mels: usize,
    iters: usize,
) -> Result<Vec<f32>, ReconError> {
    let params = StftParams::new(GRIFFINMEL_N_FFT, GRIFFINMEL_HOP, sample_rate)?;
    let fb = mel_filterbank(n_mels, &params, 0.0, sample_rate as f32 / 2.0)?;
    let pad = GRIFFINMEL_N_FFT;
    let mut total = x.len() + 2 * pad;
    total += (GRIFFINMEL_HOP - (total - GRIFFINMEL_N_FFT) % GRIFFINMEL_HOP) % GRIFFINMEL_HOP;
    let mut padded = vec![0f32; total];
    padded[pad..pad + x.len()].copy_from_slice(x);
    let spec = stft_samples(&padded, &params)?;
    let mel = fb.apply(&spec.magnitudes(), spec.frames);
    let y = griffin_lim(&mel, spec.frames, &fb, &params, iters)?;
    Ok(y.channel(0)[pad..pad + x.len()].to_vec())
}

/// A decoder ready to run: codec weights are loaded once.
pub enum Decoder {
    Griffinmel { n_mels: usize, iters: usize },
    Toycodec(Box<ToyCodec>),
    External(DecoderSpec),
}

impl Decoder {
    pub fn resolve(spec: &DecoderSpec) -> Result<Self, ReconError> {
        spec.validate()?;
        match &spec.config {
            DecoderConfig::Griffinmel { n_mels, gl_iters } => Ok(Decoder::Griffinmel {
                n_mels: *n_mels,
                iters: *gl_iters,
            }),
            DecoderConfig::Toycodec { checkpoint, level } => {
                if !checkpoint.exists() {
                    return Err(ReconError::MissingCheckpoint {
                        path: checkpoint.clone(),
                    });
                }
                let codec = ToyCodec::load(checkpoint)?;
                if codec.level != *level {
                    return Err(ReconError::BadCheckpoint {
                        path: checkpoint.clone(),
                        detail: format!("trained for level {}, configured {level}", codec.level),
                    });
                }
                Ok(Decoder::Toycodec(Box::new(codec)))
            }
            DecoderConfig::External { dir, .. } => {
                if !dir.is_dir() {
                    return Err(ReconError::InvalidConfig(format!(
                        "{}: external directory {} does not exist",
                        spec.id,
                        dir.display()
                    )));
                }
                Ok(Decoder::External(spec.clone()))
            }
        }
    }

    /// Reconstructs `clip`. External decoders look the file up by
    /// `track_id`.
    pub fn reconstruct(
        &self,
        clip: &AudioClip,
        track_id: Option<&str>,
    ) -> Result<AudioClip, ReconError> {
        if clip.is_empty() {
            return Err(ReconError::Audio(AudioError::EmptyClip));
        }
        match self {
            Decoder::Griffinmel { n_mels, iters } => {
                let sr = clip.sample_rate();
                let chans = clip
                    .channel_data()
                    .iter()
                    .map(|c| griffinmel_samples(c, sr, *n_mels, *iters))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(AudioClip::new(chans, sr)?)
            }
            Decoder::Toycodec(codec) => codec.reconstruct(clip),
            Decoder::External(spec) => {
                let track_id = track_id.ok_or(ReconError::NoTrackId)?;
                let path = spec.external_path(track_id).expect("external spec");
                if !path.exists() {
                    return Err(ReconError::MissingExternal {
                        track_id: track_id.to_string(),
                        path,
                    });
                }
                let mut out = read_wav(&path)?;
                if out.sample_rate() != clip.sample_rate() {
                    out = resample(&out, clip.sample_rate())?;
                }
                if (out.duration() - clip.duration()).abs() > EXTERNAL_DURATION_SLACK {
                    return Err(ReconError::DurationMismatch {
                        path,
                        got: out.duration(),
                        expected: clip.duration(),
                    });
                }
                // align lengths exactly so snippets line up with the original
                let n = clip.len();
                let chans = out
                    .into_channels()
                    .into_iter()
                    .map(|mut c| {
                        c.resize(n, 0.0);
                        c
                    })
                    .collect();
                Ok(AudioClip::new(chans, clip.sample_rate())?)
            }
        }
    }
}

pub fn reconstruct(
    clip: &AudioClip,
    spec: &DecoderSpec,
    track_id: Option<&str>,
) -> Result<AudioClip, ReconError> {
    Decoder::resolve(spec)?.reconstruct(clip, track_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconFailure {
    pub track_id: String,
    /// `None` when the real file itself could not be read.
    pub decoder_id: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub manifest: DatasetManifest,
    pub written: usize,
    pub skipped: usize,
    pub failures: Vec<ReconFailure>,
}

/// Relative location of a reconstruction inside the output directory.
pub fn output_path(out_dir: &Path, track_id: &str, decoder_id: &str) -> PathBuf {
    out_dir
        .join(decoder_id)
        .join(format!("{track_id}.{decoder_id}.wav"))
}

fn is_complete(path: &Path, frames: usize, channels: usize) -> bool {
    wav_info(path)
        .map(|i| i.frames == frames && i.channels == channels)
        .unwrap_or(false)
}

enum Outcome {
    Written(String, PathBuf),
    Skipped(String, PathBuf),
    Failed(ReconFailure),
}

/// Reconstructs every track with every decoder into
/// `<out_dir>/<decoder>/<track>.<decoder>.wav`, registering outputs in the
/// returned manifest. Existing complete outputs are kept. Failures are
/// recorded per track and do not stop the batch.
pub fn batch_reconstruct(
    manifest: &DatasetManifest,
    specs: &[DecoderSpec],
    out_dir: &Path,
) -> Result<BatchReport, ReconError> {
    check_unique_ids(specs)?;
    let decoders: Vec<Decoder> = specs
        .iter()
        .map(Decoder::resolve)
        .collect::<Result<_, _>>()?;
    for s in specs {
        let dir = out_dir.join(&s.id);
        fs::create_dir_all(&dir).map_err(|source| ReconError::Io { path: dir, source })?;
    }
    let per_track: Vec<Vec<Outcome>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let info = match wav_info(&e.real_path) {
                Ok(i) => i,
                Err(err) => {
                    return vec![Outcome::Failed(ReconFailure {
                        track_id: e.track_id.clone(),
                        decoder_id: None,
                        error: err.to_string(),
                    })]
                }
            };
            let pending: Vec<usize> = (0..specs.len())
                .filter(|&i| {
                    !is_complete(
                        &output_path(out_dir, &e.track_id, &specs[i].id),
                        info.frames,
                        info.channels,
                    )
                })
                .collect();
            let mut outcomes: Vec<Outcome> = (0..specs.len())
                .filter(|i| !pending.contains(i))
                .map(|i| {
                    Outcome::Skipped(
                        specs[i].id.clone(),
                        output_path(out_dir, &e.track_id, &specs[i].id),
                    )
                })
                .collect();
            if pending.is_empty() {
                return outcomes;
            }
            let clip = match read_wav(&e.real_path) {
                Ok(c) => c,
                Err(err) => {
                    outcomes.push(Outcome::Failed(ReconFailure {
                        track_id: e.track_id.clone(),
                        decoder_id: None,
                        error: err.to_string(),
                    }));
                    return outcomes;
                }
            };
            for i in pending {
                let spec = &specs[i];
                let path = output_path(out_dir, &e.track_id, &spec.id);
                let result = decoders[i]
                    .reconstruct(&clip, Some(&e.track_id))
                    .and_then(|y| {
                        // write to a temporary name so an interrupted run never
                        // leaves a file that looks complete
                        let tmp = path.with_extension("wav.partial");
                        write_wav(&y, &tmp, info.encoding)?;
                        fs::rename(&tmp, &path).map_err(|source| ReconError::Io {
                            path: path.clone(),
                            source,
                        })
                    });
                outcomes.push(match result {
                    Ok(()) => Outcome::Written(spec.id.clone(), path),
                    Err(err) => Outcome::Failed(ReconFailure {
                        track_id: e.track_id.clone(),
                        decoder_id: Some(spec.id.clone()),
                        error: err.to_string(),
                    }),
                });
            }
            outcomes
        })
        .collect();

    let mut out = manifest.clone();
    for s in specs {
        if !out.decoder_ids.contains(&s.id) {
            out.decoder_ids.push(s.id.clone());
        }
    }
    let (mut written, mut skipped, mut failures) = (0, 0, Vec::new());
    for (entry, outcomes) in out.entries.iter_mut().zip(per_track) {
        for o in outcomes {
            match o {
                Outcome::Written(id, p) => {
                    written += 1;
                    entry.reconstructions.insert(id, p);
                }
                Outcome::Skipped(id, p) => {
                    skipped += 1;
                    entry.reconstructions.insert(id, p);
                }
                Outcome::Failed(f) => {
                    if let Some(id) = &f.decoder_id {
                        entry.reconstructions.remove(id);
                    }
                    failures.push(f);
                }
            }
        }
    }
    Ok(BatchReport {
        manifest: out,
        written,
        skipped,
        failures,
    })
}
