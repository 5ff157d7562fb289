//! WAV decoding/encoding, band-limited resampling and mono down-mixing.
//!
//! Everything downstream works on [`AudioClip`]: per-channel `f32` buffers in
//! `[-1, 1]` with a sample rate.

use std::f64::consts::PI;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("audio file not found: {0}")]
    NotFound(PathBuf),
    #[error("unsupported wav encoding in {path}: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("truncated data chunk in {path}: expected {expected} samples, read {read}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        read: usize,
    },
    #[error("malformed wav file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write an empty clip")]
    EmptyClip,
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("invalid sample rate {0}")]
    InvalidRate(u32),
    #[error("mix weights have length {got}, clip has {channels} channels")]
    WeightLength { got: usize, channels: usize },
    #[error("mix weight {0} is negative")]
    NegativeWeight(f32),
    #[error("mix weights sum to {0}, expected 1")]
    WeightSum(f32),
    #[error("requested window [{start}, {end}) exceeds file length {len}")]
    WindowOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Multi-channel sampled signal.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<Vec<f32>>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidRate(0));
        }
        if samples.is_empty() {
            return Err(AudioError::InvalidClip("clip has no channels".into()));
        }
        let len = samples[0].len();
        if samples.iter().any(|c| c.len() != len) {
            return Err(AudioError::InvalidClip("channels differ in length".into()));
        }
        if samples.iter().flatten().any(|s| !s.is_finite()) {
            return Err(AudioError::InvalidClip("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn silence(channels: usize, len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![vec![0.0; len]; channels.max(1)], sample_rate)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    /// Number of sample frames per channel.
    pub fn len(&self) -> usize {
        self.samples[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, idx: usize) -> &[f32] {
        &self.samples[idx]
    }

    pub fn channel_data(&self) -> &[Vec<f32>] {
        &self.samples
    }

    pub fn into_channels(self) -> Vec<Vec<f32>> {
        self.samples
    }

    /// Applies `f` to every channel and rebuilds the clip at `sample_rate`.
    pub fn map_channels<F>(&self, sample_rate: u32, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f32]) -> Vec<f32>,
    {
        Self::new(self.samples.iter().map(|c| f(c)).collect(), sample_rate)
    }

    /// Sub-range `[start, start + len)` of every channel.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(AudioError::WindowOutOfRange {
                start,
                end: start + len,
                len: self.len(),
            });
        }
        Self::new(
            self.samples
                .iter()
                .map(|c| c[start..start + len].to_vec())
                .collect(),
            self.sample_rate,
        )
    }

    /// Root-mean-square over all channels.
    pub fn rms(&self) -> f64 {
        let n = (self.len() * self.channels()).max(1) as f64;
        (self
            .samples
            .iter()
            .flatten()
            .map(|&s| (s as f64) * (s as f64))
            .sum::<f64>()
            / n)
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Header-level information without decoding the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavInfo {
    pub sample_rate: u32,
    pub channels: usize,
    pub frames: usize,
    /// Closest writable encoding to the stored one (PCM24 maps to float32,
    /// which represents it losslessly).
    pub encoding: WavEncoding,
}

impl WavInfo {
    pub fn duration(&self) -> f64 {
        self.frames as f64 / self.sample_rate as f64
    }
}

fn open(path: &Path) -> Result<WavReader<std::io::BufReader<std::fs::File>>> {
    if !path.exists() {
        return Err(AudioError::NotFound(path.to_path_buf()));
    }
    WavReader::open(path).map_err(|e| map_hound(path, e))
}

fn map_hound(path: &Path, e: hound::Error) -> AudioError {
    match e {
        hound::Error::IoError(source) if source.kind() == ErrorKind::NotFound => {
            AudioError::NotFound(path.to_path_buf())
        }
        hound::Error::IoError(source) => AudioError::Io {
            path: path.to_path_buf(),
            source,
        },
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: "format not handled by decoder".into(),
        },
        other => AudioError::Malformed {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    }
}

fn check_spec(path: &Path, spec: &WavSpec) -> Result<()> {
    match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) | (SampleFormat::Int, 24) | (SampleFormat::Float, 32) => Ok(()),
        (fmt, bits) => Err(AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: format!("{fmt:?} {bits}-bit"),
        }),
    }
}

pub fn wav_info(path: &Path) -> Result<WavInfo> {
    let reader = open(path)?;
    let spec = reader.spec();
    check_spec(path, &spec)?;
    Ok(WavInfo {
        sample_rate: spec.sample_rate,
        channels: spec.channels as usize,
        frames: reader.duration() as usize,
        encoding: match (spec.sample_format, spec.bits_per_sample) {
            (SampleFormat::Int, 16) => WavEncoding::Pcm16,
            _ => WavEncoding::Float32,
        },
    })
}

fn decode<R: std::io::Read>(
    path: &Path,
    reader: &mut WavReader<R>,
    spec: WavSpec,
    frames: usize,
) -> Result<AudioClip> {
    let channels = spec.channels as usize;
    let expected = frames * channels;
    let mut out = vec![Vec::with_capacity(frames); channels];
    let mut read = 0usize;
    let mut push = |v: f32, read: &mut usize| {
        out[*read % channels].push(v);
        *read += 1;
    };
    let truncated = |read: usize| AudioError::Truncated {
        path: path.to_path_buf(),
        expected,
        read,
    };
    match spec.sample_format {
        SampleFormat::Float => {
            for s in reader.samples::<f32>().take(expected) {
                let v = s.map_err(|_| truncated(read))?;
                push(if v.is_finite() { v } else { 0.0 }, &mut read);
            }
        }
        SampleFormat::Int => {
            let scale = 1.0 / (1u32 << (spec.bits_per_sample - 1)) as f32;
            for s in reader.samples::<i32>().take(expected) {
                let v = s.map_err(|_| truncated(read))?;
                push(v as f32 * scale, &mut read);
            }
        }
    }
    if read != expected {
        return Err(truncated(read));
    }
    AudioClip::new(out, spec.sample_rate)
}

/// Decodes a PCM16, PCM24 or float32 RIFF/WAVE file.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = open(path)?;
    let spec = reader.spec();
    check_spec(path, &spec)?;
    let frames = reader.duration() as usize;
    decode(path, &mut reader, spec, frames)
}

/// Decodes `frames` sample frames starting at frame `start`.
pub fn read_wav_window(path: &Path, start: usize, frames: usize) -> Result<AudioClip> {
    let mut reader = open(path)?;
    let spec = reader.spec();
    check_spec(path, &spec)?;
    let total = reader.duration() as usize;
    if start + frames > total {
        return Err(AudioError::WindowOutOfRange {
            start,
            end: start + frames,
            len: total,
        });
    }
    reader.seek(start as u32).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(path, &mut reader, spec, frames)
}

pub fn write_wav(clip: &AudioClip, path: &Path, encoding: WavEncoding) -> Result<()> {
    if clip.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    let spec = WavSpec {
        channels: clip.channels() as u16,
        sample_rate: clip.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let io_err = |e: hound::Error| map_hound(path, e);
    let mut writer = WavWriter::create(path, spec).map_err(io_err)?;
    for t in 0..clip.len() {
        for ch in clip.channel_data() {
            match encoding {
                WavEncoding::Pcm16 => {
                    let v = (ch[t] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(v).map_err(io_err)?;
                }
                WavEncoding::Float32 => writer.write_sample(ch[t]).map_err(io_err)?,
            }
        }
    }
    writer.finalize().map_err(io_err)
}

/// Zero-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

const KAISER_BETA: f64 = 8.6;
/// Zero crossings of the interpolation kernel on each side.
const HALF_TAPS: usize = 32;
const MAX_EXACT_PHASES: u64 = 1024;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Polyphase Kaiser-windowed sinc interpolator.
struct SincTable {
    taps: usize,
    half: isize,
    table: Vec<f32>,
}

impl SincTable {
    fn new(cutoff: f64, phases: usize) -> Self {
        let half_width = HALF_TAPS as f64 / cutoff;
        let half = half_width.ceil() as isize;
        let taps = 2 * half as usize;
        let i0_beta = bessel_i0(KAISER_BETA);
        // Row p holds weights for fractional position p / phases; one extra
        // row (p == phases) lets the interpolated path read p + 1 safely.
        let mut table = vec![0f32; (phases + 1) * taps];
        for p in 0..=phases {
            let frac = p as f64 / phases as f64;
            for k in 0..taps {
                // input index offset relative to floor(t): i = i0 - half + 1 + k
                let d = frac - (k as isize - half + 1) as f64;
                let r = d / half_width;
                let w = if r.abs() >= 1.0 {
                    0.0
                } else {
                    bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta
                };
                let x = cutoff * d;
                let sinc = if x.abs() < 1e-12 {
                    1.0
                } else {
                    (PI * x).sin() / (PI * x)
                };
                table[p * taps + k] = (cutoff * sinc * w) as f32;
            }
        }
        Self { taps, half, table }
    }

    fn dot(&self, x: &[f32], i0: isize, row: &[f32]) -> f64 {
        let first = i0 - self.half + 1;
        let mut acc = 0f64;
        if first >= 0 && first + self.taps as isize <= x.len() as isize {
            let seg = &x[first as usize..first as usize + self.taps];
            for (a, b) in seg.iter().zip(row) {
                acc += (*a as f64) * (*b as f64);
            }
        } else {
            for (k, &w) in row.iter().enumerate() {
                let i = first + k as isize;
                if i >= 0 && (i as usize) < x.len() {
                    acc += x[i as usize] as f64 * w as f64;
                }
            }
        }
        acc
    }
}

/// Resamples one channel by the rational factor `up / down`.
fn resample_channel(x: &[f32], up: u64, down: u64, out_len: usize) -> Vec<f32> {
    let cutoff = (up as f64 / down as f64).min(1.0);
    let exact = up <= MAX_EXACT_PHASES;
    let phases = if exact {
        up as usize
    } else {
        MAX_EXACT_PHASES as usize
    };
    let table = SincTable::new(cutoff, phases);
    let mut out = Vec::with_capacity(out_len);
    let mut row = vec![0f32; table.taps];
    for j in 0..out_len as u64 {
        let num = j * down;
        let i0 = (num / up) as isize;
        let rem = num % up;
        let v = if exact {
            let p = rem as usize;
            table.dot(x, i0, &table.table[p * table.taps..(p + 1) * table.taps])
        } else {
            let pos = rem as f64 / up as f64 * phases as f64;
            let p = pos.floor() as usize;
            let f = (pos - p as f64) as f32;
            let (a, b) = (
                &table.table[p * table.taps..(p + 1) * table.taps],
                &table.table[(p + 1) * table.taps..(p + 2) * table.taps],
            );
            for ((r, &u), &v) in row.iter_mut().zip(a).zip(b) {
                *r = u + f * (v - u);
            }
            table.dot(x, i0, &row)
        };
        out.push(v as f32);
    }
    out
}

/// Band-limited resampling to `target_rate` (Kaiser-windowed sinc, beta 8.6,
/// 64 taps per phase at unit cutoff).
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(AudioError::InvalidRate(0));
    }
    let src = clip.sample_rate() as u64;
    if src == target_rate as u64 {
        return Ok(clip.clone());
    }
    let g = gcd(src, target_rate as u64);
    let (up, down) = (target_rate as u64 / g, src / g);
    let out_len = ((clip.len() as u64 * up + down / 2) / down) as usize;
    clip.map_channels(target_rate, |c| resample_channel(c, up, down, out_len))
}

/// Resamples a raw buffer by an arbitrary (possibly irrational) factor
/// `out_len / in_len ≈ factor`, keeping the nominal sample rate. Used by
/// pitch shifting.
pub fn resample_by_factor(x: &[f32], factor: f64, out_len: usize) -> Vec<f32> {
    // Fixed-point approximation of the step with a large denominator.
    const DEN: u64 = 1 << 20;
    let up = DEN;
    let down = ((DEN as f64) / factor).round().max(1.0) as u64;
    let g = gcd(up, down);
    resample_channel(x, up / g, down / g, out_len)
}

/// Weighted down-mix to a single channel.
pub fn mix_to_mono(clip: &AudioClip, weights: &[f32]) -> Result<AudioClip> {
    if weights.len() != clip.channels() {
        return Err(AudioError::WeightLength {
            got: weights.len(),
            channels: clip.channels(),
        });
    }
    if let Some(&w) = weights.iter().find(|&&w| w < 0.0) {
        return Err(AudioError::NegativeWeight(w));
    }
    let sum: f32 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(AudioError::WeightSum(sum));
    }
    if clip.channels() == 1 {
        return Ok(clip.clone());
    }
    let mut out = vec![0f32; clip.len()];
    for (ch, &w) in clip.channel_data().iter().zip(weights) {
        for (o, &s) in out.iter_mut().zip(ch) {
            *o += w * s;
        }
    }
    AudioClip::mono(out, clip.sample_rate())
}
