//! Audio manipulations applied at evaluation time and the per-transform
//! robustness report.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{
    read_wav, resample, resample_by_factor, write_wav, AudioClip, AudioError, WavEncoding,
};
use crate::dataset::{
    assemble, derive_seed, plan_eval_set, prepare_clip, read_excerpt, snippet_samples,
    DatasetError, DatasetManifest, Preprocess, Provenance, EVAL_EXCERPT, EVAL_GUARD_BEFORE, REAL,
};
use crate::eval::{evaluate, report_from, EvalConfig, EvalError, EvalReport};
use crate::nn::{model_forward, ModelParams, NnError};
use crate::spectral::{istft_samples, stft_samples, ComplexStft, SpectralError, StftParams};
use crate::training::EVAL_CHUNK;

pub const MAX_SEMITONES: f64 = 2.0;
pub const STRETCH_RANGE: (f64, f64) = (0.8, 1.2);
pub const EQ_BANDS_HZ: [f64; 3] = [200.0, 1000.0, 5000.0];
pub const EQ_Q: f64 = std::f64::consts::FRAC_1_SQRT_2;
pub const EQ_RANGE_DB: f64 = 6.0;
pub const DEFAULT_NOISE_SNR_DB: f64 = 30.0;
pub const REENCODE_BITRATE_KBPS: u32 = 64;
/// Largest duration change tolerated from an external encoder.
pub const REENCODE_SLACK_SECONDS: f64 = 0.05;
/// Shortest clip accepted by the time-domain transforms.
pub const MIN_SECONDS: f64 = 1.0;

const PV_N_FFT: usize = 2048;
const PV_HOP: usize = 512;

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error("tool missing: {0}")]
    ToolMissing(String),
    #[error("external encoder failed: {0}")]
    Tool(String),
    #[error("invalid transform: {0}")]
    InvalidSpec(String),
    #[error("clip of {seconds:.3}s is shorter than the {MIN_SECONDS}s minimum")]
    TooShort { seconds: f64 },
    #[error("i/o error on {path}: {source}")]
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
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

type Result<T> = std::result::Result<T, RobustnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReencodeCodec {
    Mp3,
    Aac,
    Opus,
}

impl ReencodeCodec {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mp3 => "mp3",
            Self::Aac => "aac",
            Self::Opus => "opus",
        }
    }

    /// File extension of the intermediate encoded file.
    pub fn extension(self) -> &'static str {
        match self {
            Self::Mp3 => "mp3",
            Self::Aac => "m4a",
            Self::Opus => "opus",
        }
    }
}

/// A manipulation. Optional parameters are drawn per clip from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    /// Unset means uniform in ±2 semitones.
    PitchShift {
        semitones: Option<f64>,
    },
    /// Output duration over input duration; unset means uniform in [0.8, 1.2].
    TimeStretch {
        ratio: Option<f64>,
    },
    /// Gains of the 200 Hz, 1 kHz and 5 kHz bands; unset means uniform in ±6 dB.
    Eq {
        gains_db: Option<[f64; 3]>,
    },
    Reverb {
        decay: f64,
        wet: f64,
    },
    WhiteNoise {
        snr_db: f64,
    },
    /// Round trip through an external encoder. `command` is run by `sh -c`
    /// after substituting `{in}`, `{out}`, `{tmp}`, `{codec}` and
    /// `{bitrate}`; it must leave a WAV file at `{out}`.
    Reencode {
        codec: ReencodeCodec,
        command: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    #[serde(flatten)]
    pub kind: TransformKind,
    #[serde(default)]
    pub seed: u64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RobustnessError::InvalidSpec(m));
        match &self.kind {
            TransformKind::PitchShift { semitones: Some(s) } if !(s.abs() <= MAX_SEMITONES) => bad(
                format!("pitch shift of {s} semitones outside ±{MAX_SEMITONES}"),
            ),
            TransformKind::TimeStretch { ratio: Some(r) }
                if !(STRETCH_RANGE.0..=STRETCH_RANGE.1).contains(r) =>
            {
                bad(format!("stretch ratio {r} outside [0.8, 1.2]"))
            }
            TransformKind::Eq { gains_db: Some(g) } if g.iter().any(|v| !v.is_finite()) => {
                bad("non-finite EQ gain".into())
            }
            TransformKind::Reverb { decay, wet }
                if !(*decay > 0.0) || !(0.0..=1.0).contains(wet) =>
            {
                bad(format!(
                    "reverb decay {decay} must be positive and wet {wet} in [0, 1]"
                ))
            }
            TransformKind::WhiteNoise { snr_db } if !snr_db.is_finite() => {
                bad("non-finite noise SNR".into())
            }
            _ => Ok(()),
        }
    }

    /// The same transform with its seed mixed with `key`, so each clip of a
    /// report draws its own parameters.
    pub fn for_item(&self, key: &[&[u8]]) -> Self {
        let mut parts: Vec<&[u8]> = Vec::with_capacity(key.len() + 1);
        let seed = self.seed.to_le_bytes();
        parts.push(&seed);
        parts.extend_from_slice(key);
        Self {
            kind: self.kind.clone(),
            seed: derive_seed(&parts),
        }
    }

    /// Duration ratio applied by the transform with this seed.
    pub fn duration_ratio(&self) -> f64 {
        match &self.kind {
            TransformKind::TimeStretch { ratio } => {
                ratio.unwrap_or_else(|| self.rng().gen_range(STRETCH_RANGE.0..=STRETCH_RANGE.1))
            }
            _ => 1.0,
        }
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            TransformKind::Identity => write!(f, "identity"),
            TransformKind::PitchShift { semitones: Some(s) } => write!(f, "pitch_shift({s:+})"),
            TransformKind::PitchShift { semitones: None } => write!(f, "pitch_shift(random)"),
            TransformKind::TimeStretch { ratio: Some(r) } => write!(f, "time_stretch({r})"),
            TransformKind::TimeStretch { ratio: None } => write!(f, "time_stretch(random)"),
            TransformKind::Eq { gains_db: Some(g) } => {
                write!(f, "eq({:+}/{:+}/{:+} dB)", g[0], g[1], g[2])
            }
            TransformKind::Eq { gains_db: None } => write!(f, "eq(random)"),
            TransformKind::Reverb { decay, wet } => write!(f, "reverb({decay}s/{wet})"),
            TransformKind::WhiteNoise { snr_db } => write!(f, "white_noise({snr_db}dB)"),
            TransformKind::Reencode { codec, .. } => {
                write!(f, "reencode({}/{REENCODE_BITRATE_KBPS}k)", codec.as_str())
            }
        }
    }
}

/// Applies a transform; sample rate and channel count are preserved.
pub fn apply_transform(clip: &AudioClip, spec: &TransformSpec) -> Result<AudioClip> {
    spec.validate()?;
    if clip.duration() < MIN_SECONDS && !matches!(spec.kind, TransformKind::Identity) {
        return Err(RobustnessError::TooShort {
            seconds: clip.duration(),
        });
    }
    let mut rng = spec.rng();
    let sr = clip.sample_rate();
    match &spec.kind {
        TransformKind::Identity => Ok(clip.clone()),
        TransformKind::PitchShift { semitones } => {
            let s = semitones.unwrap_or_else(|| rng.gen_range(-MAX_SEMITONES..=MAX_SEMITONES));
            pitch_shift(clip, s)
        }
        TransformKind::TimeStretch { .. } => time_stretch(clip, spec.duration_ratio()),
        TransformKind::Eq { gains_db } => {
            let gains = gains_db
                .unwrap_or_else(|| [0; 3].map(|_| rng.gen_range(-EQ_RANGE_DB..=EQ_RANGE_DB)));
            let sections: Vec<[f64; 5]> = EQ_BANDS_HZ
                .iter()
                .zip(gains)
                .map(|(&f, g)| peaking_biquad(f, g, EQ_Q, sr as f64))
                .collect();
            Ok(clip.map_channels(sr, |c| biquad_cascade(&sections, c))?)
        }
        TransformKind::Reverb { decay, wet } => {
            Ok(clip.map_channels(sr, |c| schroeder_reverb(c, sr, *decay, *wet))?)
        }
        TransformKind::WhiteNoise { snr_db } => white_noise(clip, *snr_db, &mut rng),
        TransformKind::Reencode { codec, command } => reencode(clip, *codec, command.as_deref()),
    }
}

fn wrap_phase(p: f32) -> f32 {
    let two_pi = 2.0 * std::f32::consts::PI;
    p - two_pi * ((p + std::f32::consts::PI) / two_pi).floor()
}

/// Phase-vocoder time scaling of one channel to `round(len * ratio)` samples.
/// Synthesis frames advance by a fixed hop while analysis positions advance
/// by `hop / ratio`, with magnitudes interpolated between frames.
pub fn phase_vocoder(x: &[f32], ratio: f64) -> Result<Vec<f32>> {
    let params = StftParams::new(PV_N_FFT, PV_HOP, 44100)?;
    let out_len = (x.len() as f64 * ratio).round() as usize;
    let mut padded = vec![0f32; PV_N_FFT];
    padded.extend_from_slice(x);
    padded.resize(padded.len() + 2 * PV_N_FFT, 0.0);
    let spec = stft_samples(&padded, &params)?;
    let bins = params.bins();
    let rate = 1.0 / ratio;
    let steps: Vec<f64> = (0..)
        .map(|t| t as f64 * rate)
        .take_while(|&s| s < (spec.frames - 1) as f64)
        .collect();
    let mut out = ComplexStft::zeros(params, steps.len());
    let advance: Vec<f32> = (0..bins)
        .map(|k| (2.0 * PI * k as f64 * PV_HOP as f64 / PV_N_FFT as f64) as f32)
        .collect();
    let mut phase: Vec<f32> = spec.frame(0).iter().map(|z| z.arg()).collect();
    for (t, &step) in steps.iter().enumerate() {
        let i = step.floor() as usize;
        let alpha = (step - i as f64) as f32;
        let (a, b) = (spec.frame(i), spec.frame(i + 1));
        let dst = &mut out.data[t * bins..(t + 1) * bins];
        for k in 0..bins {
            let mag = (1.0 - alpha) * a[k].norm() + alpha * b[k].norm();
            dst[k] = realfft::num_complex::Complex32::from_polar(mag, phase[k]);
            let dphi = wrap_phase(b[k].arg() - a[k].arg() - advance[k]);
            phase[k] += advance[k] + dphi;
        }
    }
    let y = istft_samples(&out)?;
    let start = (PV_N_FFT as f64 * ratio).round() as usize;
    let mut res: Vec<f32> = y.into_iter().skip(start).take(out_len).collect();
    res.resize(out_len, 0.0);
    Ok(res)
}

/// Duration scaled by `ratio`, pitch preserved.
pub fn time_stretch(clip: &AudioClip, ratio: f64) -> Result<AudioClip> {
    let chans = clip
        .channel_data()
        .iter()
        .map(|c| phase_vocoder(c, ratio))
        .collect::<Result<Vec<_>>>()?;
    Ok(AudioClip::new(chans, clip.sample_rate())?)
}

/// Frequencies scaled by `2^(semitones/12)` with the duration kept: the
/// signal is stretched by that factor and resampled back to its length.
pub fn pitch_shift(clip: &AudioClip, semitones: f64) -> Result<AudioClip> {
    let r = 2f64.powf(semitones / 12.0);
    let len = clip.len();
    let chans = clip
        .channel_data()
        .iter()
        .map(|c| {
            let y = phase_vocoder(c, r)?;
            Ok(resample_by_factor(&y, len as f64 / y.len() as f64, len))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AudioClip::new(chans, clip.sample_rate())?)
}

/// Peaking-EQ biquad `[b0, b1, b2, a1, a2]` normalised by `a0`.
pub fn peaking_biquad(freq: f64, gain_db: f64, q: f64, sample_rate: f64) -> [f64; 5] {
    let a = 10f64.powf(gain_db / 40.0);
    let w0 = 2.0 * PI * freq / sample_rate;
    let alpha = w0.sin() / (2.0 * q);
    let cos = w0.cos();
    let a0 = 1.0 + alpha / a;
    [
        (1.0 + alpha * a) / a0,
        -2.0 * cos / a0,
        (1.0 - alpha * a) / a0,
        -2.0 * cos / a0,
        (1.0 - alpha / a) / a0,
    ]
}

fn biquad_cascade(sections: &[[f64; 5]], x: &[f32]) -> Vec<f32> {
    let mut buf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    for &[b0, b1, b2, a1, a2] in sections {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in buf.iter_mut() {
            let y = b0 * *v + z1;
            z1 = b1 * *v - a1 * y + z2;
            z2 = b2 * *v - a2 * y;
            *v = y;
        }
    }
    buf.into_iter().map(|v| v as f32).collect()
}

const COMB_MS: [f64; 4] = [29.7, 37.1, 41.1, 43.7];
const ALLPASS: [(f64, f64); 2] = [(5.0, 0.7), (1.7, 0.7)];

/// Schroeder reverberator: four parallel feedback combs whose gains give a
/// 60 dB decay in `decay` seconds, then two series all-passes.
pub fn schroeder_reverb(x: &[f32], sample_rate: u32, decay: f64, wet: f64) -> Vec<f32> {
    let sr = sample_rate as f64;
    let n = x.len();
    let mut acc = vec![0f64; n];
    for ms in COMB_MS {
        let d = ((ms * 1e-3 * sr).round() as usize).max(1);
        let g = 10f64.powf(-3.0 * (d as f64 / sr) / decay);
        let mut y = vec![0f64; n];
        for i in 0..n {
            y[i] = x[i] as f64 + if i >= d { g * y[i - d] } else { 0.0 };
            acc[i] += y[i] / COMB_MS.len() as f64;
        }
    }
    for (ms, g) in ALLPASS {
        let d = ((ms * 1e-3 * sr).round() as usize).max(1);
        let input = acc.clone();
        for i in 0..n {
            let (xd, yd) = if i >= d {
                (input[i - d], acc[i - d])
            } else {
                (0.0, 0.0)
            };
            acc[i] = -g * input[i] + xd + g * yd;
        }
    }
    x.iter()
        .zip(&acc)
        .map(|(&d, &w)| ((1.0 - wet) * d as f64 + wet * w) as f32)
        .collect()
}

/// Gaussian noise scaled so the clip-to-noise RMS ratio is exactly `snr_db`.
pub fn white_noise<R: Rng>(clip: &AudioClip, snr_db: f64, rng: &mut R) -> Result<AudioClip> {
    let noise: Vec<Vec<f64>> = (0..clip.channels())
        .map(|_| {
            (0..clip.len())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let count = (clip.channels() * clip.len()) as f64;
    let noise_rms = (noise.iter().flatten().map(|v| v * v).sum::<f64>() / count).sqrt();
    let target = clip.rms() / 10f64.powf(snr_db / 20.0);
    let scale = if noise_rms > 0.0 {
        target / noise_rms
    } else {
        0.0
    };
    let chans = clip
        .channel_data()
        .iter()
        .zip(noise)
        .map(|(c, n)| {
            c.iter()
                .zip(n)
                .map(|(&v, e)| (v as f64 + scale * e) as f32)
                .collect()
        })
        .collect();
    Ok(AudioClip::new(chans, clip.sample_rate())?)
}

fn reencode(clip: &AudioClip, codec: ReencodeCodec, command: Option<&str>) -> Result<AudioClip> {
    let template = command.filter(|c| !c.trim().is_empty()).ok_or_else(|| {
        RobustnessError::ToolMissing(format!(
            "no external encoder configured for {}",
            codec.as_str()
        ))
    })?;
    let dir = tempfile::tempdir().map_err(|source| RobustnessError::Io {
        path: std::env::temp_dir(),
        source,
    })?;
    let input = dir.path().join("in.wav");
    let output = dir.path().join("out.wav");
    let tmp = dir.path().join(format!("encoded.{}", codec.extension()));
    write_wav(clip, &input, WavEncoding::Float32)?;
    let cmd = template
        .replace("{in}", &shell_quote(&input))
        .replace("{out}", &shell_quote(&output))
        .replace("{tmp}", &shell_quote(&tmp))
        .replace("{codec}", codec.as_str())
        .replace("{bitrate}", &format!("{REENCODE_BITRATE_KBPS}k"));
    let status = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| RobustnessError::ToolMissing(format!("cannot run sh: {e}")))?;
    match status.status.code() {
        Some(0) => {}
        Some(126) | Some(127) => {
            return Err(RobustnessError::ToolMissing(format!(
                "`{cmd}`: {}",
                String::from_utf8_lossy(&status.stderr).trim()
            )))
        }
        _ => {
            return Err(RobustnessError::Tool(format!(
                "`{cmd}` exited with {}: {}",
                status.status,
                String::from_utf8_lossy(&status.stderr).trim()
            )))
        }
    }
    let decoded = resample(&read_wav(&output)?, clip.sample_rate())?;
    let drift = (decoded.duration() - clip.duration()).abs();
    if drift > REENCODE_SLACK_SECONDS {
        return Err(RobustnessError::Tool(format!(
            "reencoded duration differs by {drift:.3}s"
        )));
    }
    let len = clip.len();
    let chans = (0..clip.channels())
        .map(|c| {
            let mut v = decoded.channel(c.min(decoded.channels() - 1)).to_vec();
            v.resize(len, 0.0);
            v
        })
        .collect();
    Ok(AudioClip::new(chans, clip.sample_rate())?)
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub label: String,
    /// `Err` holds the reason a row was skipped.
    pub result: std::result::Result<EvalReport, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    /// Real class first, then decoders.
    pub classes: Vec<String>,
    /// The untransformed baseline first, then one row per transform.
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn baseline(&self) -> &EvalReport {
        self.rows[0]
            .result
            .as_ref()
            .expect("baseline row always runs")
    }

    pub fn row(&self, label: &str) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("transform,status,overall,{}\n", self.classes.join(","));
        for r in &self.rows {
            match &r.result {
                Ok(rep) => {
                    let cells: Vec<String> = self
                        .classes
                        .iter()
                        .map(|c| format!("{:.6}", rep.recall(c).unwrap_or(0.0)))
                        .collect();
                    s.push_str(&format!(
                        "{},ok,{:.6},{}\n",
                        r.label,
                        rep.overall_accuracy,
                        cells.join(",")
                    ));
                }
                Err(reason) => s.push_str(&format!(
                    "{},skipped: {},{}\n",
                    r.label,
                    reason.replace([',', '\n'], ";"),
                    ",".repeat(self.classes.len())
                )),
            }
        }
        s
    }

    /// Transforms as rows, classes as columns, values in percent.
    pub fn to_markdown(&self) -> String {
        let lw = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(9)
            .max(9);
        let cw: Vec<usize> = self.classes.iter().map(|c| c.len().max(7)).collect();
        let mut s = format!("| {:<lw$} | overall |", "transform");
        for (c, w) in self.classes.iter().zip(&cw) {
            s.push_str(&format!(" {c:>w$} |"));
        }
        s.push_str(&format!("\n|{}|--------:|", "-".repeat(lw + 2)));
        for w in &cw {
            s.push_str(&format!("{}:|", "-".repeat(w + 1)));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("| {:<lw$} |", r.label));
            match &r.result {
                Ok(rep) => {
                    s.push_str(&format!(" {:>7.1} |", 100.0 * rep.overall_accuracy));
                    for (c, w) in self.classes.iter().zip(&cw) {
                        s.push_str(&format!(
                            " {:>w$.1} |",
                            100.0 * rep.recall(c).unwrap_or(0.0)
                        ));
                    }
                }
                Err(reason) => {
                    s.push_str(&format!(" {:>7} |", "skipped"));
                    for (_, w) in self.classes.iter().zip(&cw) {
                        s.push_str(&format!(" {:>w$} |", "-"));
                    }
                    s.push_str(&format!(" {reason}"));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Reads the excerpt around a planned snippet, transforms it and cuts the
/// snippet back out at the (possibly stretched) original position.
fn transformed_item(
    provenance: &Provenance,
    path: &Path,
    spec: &TransformSpec,
    pre: &Preprocess,
) -> Result<Vec<f32>> {
    let sr = pre.stft.sample_rate;
    let excerpt_len = (EVAL_EXCERPT * sr as f64).round() as usize;
    let clip = read_excerpt(path, provenance.offset - EVAL_GUARD_BEFORE, excerpt_len, sr)?;
    let item = spec.for_item(&[
        provenance.track_id.as_bytes(),
        provenance.source.as_bytes(),
        &provenance.offset.to_le_bytes(),
    ]);
    let y = apply_transform(&clip, &item)?;
    let start = (EVAL_GUARD_BEFORE * item.duration_ratio() * sr as f64).round() as usize;
    let n = snippet_samples(pre);
    let snippet = if start + n <= y.len() {
        y.slice(start, n)?
    } else {
        y.slice(y.len().saturating_sub(n), n)?
    };
    Ok(prepare_clip(&snippet, None, pre)?)
}

/// Accuracy and per-class recall on the test split for the untransformed
/// baseline and each transform, all on the same seeded snippet set. A
/// reencode row whose encoder is missing is reported as skipped.
pub fn robustness_report(
    model: &ModelParams,
    manifest: &DatasetManifest,
    transforms: &[TransformSpec],
    eval: &EvalConfig,
) -> Result<RobustnessReport> {
    for t in transforms {
        t.validate()?;
    }
    let decoders = eval.resolved_decoders(manifest);
    let baseline = evaluate(model, manifest, eval)?;
    let classes: Vec<String> = std::iter::once(REAL.to_string())
        .chain(decoders.iter().cloned())
        .collect();
    let plans = plan_eval_set(manifest, eval.split, &decoders, eval.n_snippets, eval.seed)?;
    let pre = Preprocess::new(model.arch.representation, eval.stft);
    let mut rows = vec![RobustnessRow {
        label: "baseline".into(),
        result: Ok(baseline),
    }];
    for spec in transforms {
        let label = spec.to_string();
        let mut probs = Vec::with_capacity(plans.len());
        let mut skipped = None;
        for chunk in plans.chunks(EVAL_CHUNK) {
            let items = chunk
                .par_iter()
                .map(|p| transformed_item(&p.provenance, &p.path, spec, &pre))
                .collect::<Result<Vec<_>>>();
            let items = match items {
                Ok(v) => v,
                Err(RobustnessError::ToolMissing(m)) => {
                    log::warn!("{label}: skipped, tool missing: {m}");
                    skipped = Some(format!("tool missing: {m}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            let batch = assemble(
                &pre,
                items,
                chunk.iter().map(|p| p.provenance.clone()).collect(),
            );
            probs.extend(model_forward(model, &batch.inputs, batch.kind)?);
        }
        let result = match skipped {
            Some(reason) => Err(reason),
            None => {
                let provenance: Vec<Provenance> =
                    plans.iter().map(|p| p.provenance.clone()).collect();
                Ok(report_from(
                    &classes,
                    &provenance,
                    &probs,
                    eval.n_snippets,
                    eval.seed,
                ))
            }
        };
        rows.push(RobustnessRow { label, result });
    }
    Ok(RobustnessReport { classes, rows })
}
