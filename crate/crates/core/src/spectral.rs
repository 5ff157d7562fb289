//! Time–frequency analysis: STFT/ISTFT, the five detector input
//! representations, mel filterbanks, decibel scaling and Griffin-Lim.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use realfft::num_complex::Complex32;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{AudioClip, AudioError};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("invalid stft parameters: {0}")]
    InvalidParams(String),
    #[error("signal of {len} samples is shorter than one {n_fft}-sample window")]
    TooShort { len: usize, n_fft: usize },
    #[error("expected a mono clip, got {0} channels")]
    NotMono(usize),
    #[error("invalid frequency range [{f_min}, {f_max}] Hz for sample rate {sample_rate}")]
    FrequencyRange {
        f_min: f32,
        f_max: f32,
        sample_rate: u32,
    },
    #[error("negative magnitude {0}")]
    NegativeMagnitude(f32),
    #[error("griffin-lim needs at least one iteration")]
    ZeroIterations,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("the waveform representation is built from the clip, not from a spectrogram")]
    WaveformFromSpectrogram,
    #[error(transparent)]
    Audio(#[from] AudioError),
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// Magnitudes below this are treated as silence before the log.
pub const DB_EPS: f32 = 1e-4;
pub const DB_FLOOR: f32 = -80.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for StftParams {
    /// 2048-point Hann analysis; hop 276 places 128 frame centres in a
    /// 0.8 s window at 44.1 kHz.
    fn default() -> Self {
        Self {
            n_fft: 2048,
            hop: 276,
            sample_rate: 44100,
        }
    }
}

impl StftParams {
    pub fn new(n_fft: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        let p = Self {
            n_fft,
            hop,
            sample_rate,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.n_fft.is_power_of_two() || self.n_fft < 4 {
            return Err(SpectralError::InvalidParams(format!(
                "n_fft {} is not a power of two >= 4",
                self.n_fft
            )));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(SpectralError::InvalidParams(format!(
                "hop {} outside 1..={}",
                self.hop, self.n_fft
            )));
        }
        if self.sample_rate == 0 {
            return Err(SpectralError::InvalidParams("sample rate 0".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced by [`stft`] on a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.n_fft {
            0
        } else {
            1 + (len - self.n_fft) / self.hop
        }
    }

    /// Signal length spanned by `frames` frames.
    pub fn span(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            self.n_fft + (frames - 1) * self.hop
        }
    }

    pub fn bin_hz(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate as f64 / self.n_fft as f64
    }

    /// Number of low bins kept by a cutoff at `hz`: `floor(hz * n_fft / sr)`.
    pub fn bins_below(&self, hz: f64) -> usize {
        ((hz * self.n_fft as f64 / self.sample_rate as f64).floor() as usize).min(self.bins())
    }

    /// Periodic Hann window of length `n_fft`.
    pub fn window(&self) -> Vec<f32> {
        hann(self.n_fft)
    }
}

pub fn hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()) as f32)
        .collect()
}

type Forward = Arc<dyn RealToComplex<f32>>;
type Inverse = Arc<dyn ComplexToReal<f32>>;

#[derive(Default)]
struct PlanRegistry {
    forward: HashMap<usize, Forward>,
    inverse: HashMap<usize, Inverse>,
}

fn registry() -> &'static RwLock<PlanRegistry> {
    static PLANS: OnceLock<RwLock<PlanRegistry>> = OnceLock::new();
    PLANS.get_or_init(Default::default)
}

fn forward_plan(n: usize) -> Forward {
    if let Some(p) = registry().read().unwrap().forward.get(&n) {
        return p.clone();
    }
    let plan = RealFftPlanner::<f32>::new().plan_fft_forward(n);
    registry()
        .write()
        .unwrap()
        .forward
        .entry(n)
        .or_insert(plan)
        .clone()
}

fn inverse_plan(n: usize) -> Inverse {
    if let Some(p) = registry().read().unwrap().inverse.get(&n) {
        return p.clone();
    }
    let plan = RealFftPlanner::<f32>::new().plan_fft_inverse(n);
    registry()
        .write()
        .unwrap()
        .inverse
        .entry(n)
        .or_insert(plan)
        .clone()
}

/// `|z|` as a plain square root, without the overflow guard of `hypot`.
#[inline]
pub fn magnitude(z: Complex32) -> f32 {
    (z.re * z.re + z.im * z.im).sqrt()
}

/// Complex one-sided STFT, frame-major (`data[t * bins + k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexStft {
    pub params: StftParams,
    pub frames: usize,
    pub data: Vec<Complex32>,
}

impl ComplexStft {
    pub fn zeros(params: StftParams, frames: usize) -> Self {
        Self {
            params,
            frames,
            data: vec![Complex32::new(0.0, 0.0); frames * params.bins()],
        }
    }

    pub fn bins(&self) -> usize {
        self.params.bins()
    }

    pub fn frame(&self, t: usize) -> &[Complex32] {
        let b = self.bins();
        &self.data[t * b..(t + 1) * b]
    }

    /// Magnitudes, frame-major.
    pub fn magnitudes(&self) -> Vec<f32> {
        self.data.iter().map(|&z| magnitude(z)).collect()
    }

    pub fn scale(&mut self, s: f32) {
        for z in &mut self.data {
            *z *= s;
        }
    }
}

/// Analysis of a raw mono buffer.
pub fn stft_samples(x: &[f32], params: &StftParams) -> Result<ComplexStft> {
    params.validate()?;
    if x.len() < params.n_fft {
        return Err(SpectralError::TooShort {
            len: x.len(),
            n_fft: params.n_fft,
        });
    }
    let n = params.n_fft;
    let frames = params.frames_for(x.len());
    let bins = params.bins();
    let window = params.window();
    let plan = forward_plan(n);
    let mut input = plan.make_input_vec();
    let mut scratch = plan.make_scratch_vec();
    let mut data = vec![Complex32::new(0.0, 0.0); frames * bins];
    for t in 0..frames {
        let seg = &x[t * params.hop..t * params.hop + n];
        for ((d, &s), &w) in input.iter_mut().zip(seg).zip(&window) {
            *d = s * w;
        }
        plan.process_with_scratch(
            &mut input,
            &mut data[t * bins..(t + 1) * bins],
            &mut scratch,
        )
        .expect("fft buffer sizes match plan");
    }
    Ok(ComplexStft {
        params: *params,
        frames,
        data,
    })
}

pub fn stft(clip: &AudioClip, params: &StftParams) -> Result<ComplexStft> {
    if clip.channels() != 1 {
        return Err(SpectralError::NotMono(clip.channels()));
    }
    stft_samples(clip.channel(0), params)
}

/// Least-squares overlap-add inverse (window-square normalised).
pub fn istft_samples(spec: &ComplexStft) -> Result<Vec<f32>> {
    let params = spec.params;
    params.validate()?;
    let window = params.window();
    let inv_norm = overlap_inverse_norm(&window, params.hop, spec.frames);
    Ok(istft_with(spec, &window, &inv_norm))
}

/// Reciprocal of the summed squared windows at every output sample, zero
/// where no frame contributes.
fn overlap_inverse_norm(window: &[f32], hop: usize, frames: usize) -> Vec<f32> {
    let n = window.len();
    let mut norm = vec![0f32; (frames.max(1) - 1) * hop + n];
    for t in 0..frames {
        for (d, &w) in norm[t * hop..t * hop + n].iter_mut().zip(window) {
            *d += w * w;
        }
    }
    for v in &mut norm {
        *v = if *v > 1e-8 { 1.0 / *v } else { 0.0 };
    }
    norm
}

fn istft_with(spec: &ComplexStft, window: &[f32], inv_norm: &[f32]) -> Vec<f32> {
    let params = spec.params;
    let n = params.n_fft;
    let bins = params.bins();
    let plan = inverse_plan(n);
    let mut buf = plan.make_input_vec();
    let mut frame = plan.make_output_vec();
    let mut scratch = plan.make_scratch_vec();
    let mut out = vec![0f32; params.span(spec.frames)];
    let scale = 1.0 / n as f32;
    for t in 0..spec.frames {
        buf.copy_from_slice(&spec.data[t * bins..(t + 1) * bins]);
        buf[0].im = 0.0;
        buf[bins - 1].im = 0.0;
        plan.process_with_scratch(&mut buf, &mut frame, &mut scratch)
            .expect("fft buffer sizes match plan");
        let off = t * params.hop;
        for ((o, &f), &w) in out[off..off + n].iter_mut().zip(&frame).zip(window) {
            *o += f * scale * w;
        }
    }
    for (o, &w) in out.iter_mut().zip(inv_norm) {
        *o *= w;
    }
    out
}

/// Adjoint of [`stft_samples`] for a signal of length `len`: maps a gradient
/// with respect to the real and imaginary parts of every STFT value
/// (packed as `re + i·im`) to the gradient with respect to the samples.
pub fn stft_adjoint(grad: &ComplexStft, len: usize) -> Result<Vec<f32>> {
    let params = grad.params;
    params.validate()?;
    let n = params.n_fft;
    let bins = params.bins();
    if params.span(grad.frames) > len {
        return Err(SpectralError::Shape(format!(
            "{} frames do not fit in {len} samples",
            grad.frames
        )));
    }
    let window = params.window();
    let plan = inverse_plan(n);
    let mut buf = plan.make_input_vec();
    let mut frame = plan.make_output_vec();
    let mut scratch = plan.make_scratch_vec();
    let mut out = vec![0f32; len];
    for t in 0..grad.frames {
        // c2r doubles interior bins through Hermitian symmetry
        for (k, (b, &g)) in buf
            .iter_mut()
            .zip(&grad.data[t * bins..(t + 1) * bins])
            .enumerate()
        {
            *b = if k == 0 || k == bins - 1 {
                Complex32::new(g.re, 0.0)
            } else {
                g * 0.5
            };
        }
        plan.process_with_scratch(&mut buf, &mut frame, &mut scratch)
            .expect("fft buffer sizes match plan");
        let off = t * params.hop;
        for i in 0..n {
            out[off + i] += frame[i] * window[i];
        }
    }
    Ok(out)
}

pub fn istft(spec: &ComplexStft) -> Result<AudioClip> {
    Ok(AudioClip::mono(
        istft_samples(spec)?,
        spec.params.sample_rate,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepresentationKind {
    Waveform,
    Complex,
    Amplitude,
    Phase,
    Polar,
}

impl RepresentationKind {
    pub const ALL: [RepresentationKind; 5] = [
        RepresentationKind::Waveform,
        RepresentationKind::Complex,
        RepresentationKind::Amplitude,
        RepresentationKind::Phase,
        RepresentationKind::Polar,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RepresentationKind::Waveform => "waveform",
            RepresentationKind::Complex => "complex",
            RepresentationKind::Amplitude => "amplitude",
            RepresentationKind::Phase => "phase",
            RepresentationKind::Polar => "polar",
        }
    }

    pub fn input_channels(&self) -> usize {
        match self {
            RepresentationKind::Complex | RepresentationKind::Polar => 2,
            _ => 1,
        }
    }

    pub fn is_spectral(&self) -> bool {
        !matches!(self, RepresentationKind::Waveform)
    }
}

impl std::fmt::Display for RepresentationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RepresentationKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        RepresentationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown representation '{s}'"))
    }
}

/// Detector input tensor `[channels × bins × frames]`, or `[1 × 1 × samples]`
/// for the waveform kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub kind: RepresentationKind,
    pub channels: usize,
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<f32>,
    pub params: StftParams,
}

impl Spectrogram {
    pub fn waveform(samples: Vec<f32>, params: StftParams) -> Self {
        Self {
            kind: RepresentationKind::Waveform,
            channels: 1,
            bins: 1,
            frames: samples.len(),
            data: samples,
            params,
        }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.bins * self.frames;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn at(&self, c: usize, k: usize, t: usize) -> f32 {
        self.data[(c * self.bins + k) * self.frames + t]
    }

    /// Keeps bins `0..keep` of every channel.
    pub fn crop_bins(&self, keep: usize) -> Spectrogram {
        if !self.kind.is_spectral() || keep >= self.bins {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.channels * keep * self.frames);
        for c in 0..self.channels {
            let plane = self.channel(c);
            data.extend_from_slice(&plane[..keep * self.frames]);
        }
        Spectrogram {
            bins: keep,
            data,
            ..self.clone()
        }
    }
}

/// `20·log10(max(m, 1e-4))`, floored at −80 dB.
pub fn amplitude_to_db(mag: &[f32]) -> Result<Vec<f32>> {
    if let Some(&m) = mag.iter().find(|&&m| m < 0.0 || m.is_nan()) {
        return Err(SpectralError::NegativeMagnitude(m));
    }
    Ok(mag.iter().map(|&m| db(m)).collect())
}

fn db(m: f32) -> f32 {
    (20.0 * m.max(DB_EPS).log10()).max(DB_FLOOR)
}

/// Phase in (−π, π].
fn phase(z: Complex32) -> f32 {
    let p = z.im.atan2(z.re);
    if p <= -std::f32::consts::PI {
        std::f32::consts::PI
    } else {
        p
    }
}

/// Converts a complex STFT to one of the spectral representations. Polar
/// stacks dB amplitude with phase unless `polar_linear` is set.
pub fn to_representation_with(
    spec: &ComplexStft,
    kind: RepresentationKind,
    polar_linear: bool,
) -> Result<Spectrogram> {
    let bins = spec.bins();
    let frames = spec.frames;
    let plane = bins * frames;
    // transpose frame-major complex into [k][t] planes
    let fill = |f: &dyn Fn(Complex32) -> f32, out: &mut [f32]| {
        for t in 0..frames {
            for (k, &z) in spec.frame(t).iter().enumerate() {
                out[k * frames + t] = f(z);
            }
        }
    };
    let channels = kind.input_channels();
    let mut data = vec![0f32; channels * plane];
    match kind {
        RepresentationKind::Waveform => return Err(SpectralError::WaveformFromSpectrogram),
        RepresentationKind::Complex => {
            let (re, im) = data.split_at_mut(plane);
            fill(&|z| z.re, re);
            fill(&|z| z.im, im);
        }
        RepresentationKind::Amplitude => fill(&|z| db(magnitude(z)), &mut data),
        RepresentationKind::Phase => fill(&phase, &mut data),
        RepresentationKind::Polar => {
            let (mag, ph) = data.split_at_mut(plane);
            if polar_linear {
                fill(&|z| magnitude(z), mag);
            } else {
                fill(&|z| db(magnitude(z)), mag);
            }
            fill(&phase, ph);
        }
    }
    Ok(Spectrogram {
        kind,
        channels,
        bins,
        frames,
        data,
        params: spec.params,
    })
}

pub fn to_representation(spec: &ComplexStft, kind: RepresentationKind) -> Result<Spectrogram> {
    to_representation_with(spec, kind, false)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, row-major `[n_mels × bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub bins: usize,
    pub f_min: f32,
    pub f_max: f32,
    pub centers_hz: Vec<f64>,
    pub matrix: Vec<f32>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f32] {
        &self.matrix[m * self.bins..(m + 1) * self.bins]
    }

    /// Index range of the non-zero weights of row `m`.
    fn support(&self, m: usize) -> std::ops::Range<usize> {
        let row = self.row(m);
        let lo = row.iter().position(|&w| w != 0.0).unwrap_or(0);
        let hi = row.iter().rposition(|&w| w != 0.0).map_or(0, |i| i + 1);
        lo..hi.max(lo)
    }

    /// `mel[m][t] = Σ_k W[m][k] · mag[t][k]`; `mag` is frame-major, output is
    /// `[n_mels × frames]`.
    pub fn apply(&self, mag: &[f32], frames: usize) -> Vec<f32> {
        let mut out = vec![0f32; self.n_mels * frames];
        for m in 0..self.n_mels {
            let r = self.support(m);
            let row = &self.row(m)[r.clone()];
            for t in 0..frames {
                let col = &mag[t * self.bins + r.start..t * self.bins + r.end];
                out[m * frames + t] = row.iter().zip(col).map(|(a, b)| a * b).sum();
            }
        }
        out
    }

    /// Normalised-transpose inverse: each mel value becomes its filter's
    /// weighted mean magnitude, spread back over the filter and averaged per
    /// bin by the column weight. Output is frame-major and non-negative.
    pub fn pseudo_inverse(&self, mel: &[f32], frames: usize) -> Vec<f32> {
        let row_sum: Vec<f32> = (0..self.n_mels).map(|m| self.row(m).iter().sum()).collect();
        let mut col_sum = vec![0f32; self.bins];
        for m in 0..self.n_mels {
            for (c, &w) in col_sum.iter_mut().zip(self.row(m)) {
                *c += w;
            }
        }
        let mut out = vec![0f32; frames * self.bins];
        for m in 0..self.n_mels {
            if row_sum[m] <= 0.0 {
                continue;
            }
            let r = self.support(m);
            let row = &self.row(m)[r.clone()];
            for t in 0..frames {
                let v = mel[m * frames + t] / row_sum[m];
                let dst = &mut out[t * self.bins + r.start..t * self.bins + r.end];
                for (d, &w) in dst.iter_mut().zip(row) {
                    *d += w * v;
                }
            }
        }
        for t in 0..frames {
            for (k, d) in out[t * self.bins..(t + 1) * self.bins]
                .iter_mut()
                .enumerate()
            {
                *d = if col_sum[k] > 0.0 {
                    (*d / col_sum[k]).max(0.0)
                } else {
                    0.0
                };
            }
        }
        out
    }
}

/// Triangular filters on HTK-mel-spaced centres. A filter narrower than one
/// FFT bin is widened to one bin on that side so every row keeps support.
pub fn mel_filterbank(
    n_mels: usize,
    params: &StftParams,
    f_min: f32,
    f_max: f32,
) -> Result<MelFilterbank> {
    params.validate()?;
    let nyquist = params.sample_rate as f32 / 2.0;
    if n_mels == 0 || !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
        return Err(SpectralError::FrequencyRange {
            f_min,
            f_max,
            sample_rate: params.sample_rate,
        });
    }
    let bins = params.bins();
    let (m_lo, m_hi) = (hz_to_mel(f_min as f64), hz_to_mel(f_max as f64));
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let df = params.sample_rate as f64 / params.n_fft as f64;
    let mut matrix = vec![0f32; n_mels * bins];
    for m in 0..n_mels {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        let lw = (center - left).max(df);
        let rw = (right - center).max(df);
        for k in 0..bins {
            let f = params.bin_hz(k);
            let w = if f <= center {
                1.0 - (center - f) / lw
            } else {
                1.0 - (f - center) / rw
            };
            if w > 0.0 {
                matrix[m * bins + k] = w as f32;
            }
        }
    }
    Ok(MelFilterbank {
        n_mels,
        bins,
        f_min,
        f_max,
        centers_hz: points[1..=n_mels].to_vec(),
        matrix,
    })
}

/// Two-sided squared norm from a one-sided half spectrum of an even-length
/// real transform (interior bins appear twice in the full spectrum).
fn two_sided_weight(k: usize, bins: usize) -> f64 {
    if k == 0 || k == bins - 1 {
        1.0
    } else {
        2.0
    }
}

/// `‖|X| − M‖ / ‖M‖` over the full two-sided spectrum; `target` and
/// `estimate` are frame-major.
pub fn spectral_convergence(estimate: &ComplexStft, target: &[f32]) -> f64 {
    let bins = estimate.bins();
    let (mut num, mut den) = (0f64, 0f64);
    for (i, (z, &m)) in estimate.data.iter().zip(target).enumerate() {
        let w = two_sided_weight(i % bins, bins);
        let d = magnitude(*z) as f64 - m as f64;
        num += w * d * d;
        den += w * (m as f64) * (m as f64);
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Griffin-Lim from a frame-major linear magnitude target. Returns the
/// signal after `iters` projections and the spectral convergence of every
/// iterate (`iters + 1` values, starting with the zero-phase estimate).
pub fn griffin_lim_magnitude(
    target: &[f32],
    frames: usize,
    params: &StftParams,
    iters: usize,
) -> Result<(Vec<f32>, Vec<f64>)> {
    if iters == 0 {
        return Err(SpectralError::ZeroIterations);
    }
    params.validate()?;
    let bins = params.bins();
    if target.len() != frames * bins {
        return Err(SpectralError::Shape(format!(
            "magnitude has {} values, expected {frames}×{bins}",
            target.len()
        )));
    }
    if frames == 0 {
        return Err(SpectralError::TooShort {
            len: 0,
            n_fft: params.n_fft,
        });
    }
    let mut proj = ComplexStft {
        params: *params,
        frames,
        data: target.iter().map(|&m| Complex32::new(m, 0.0)).collect(),
    };
    let window = params.window();
    let inv_norm = overlap_inverse_norm(&window, params.hop, frames);
    let mut x = istft_with(&proj, &window, &inv_norm);
    let mut trace = Vec::with_capacity(iters + 1);
    let mut den = 0f64;
    for (i, &m) in target.iter().enumerate() {
        den += two_sided_weight(i % bins, bins) * (m as f64) * (m as f64);
    }
    for _ in 0..iters {
        let est = stft_samples(&x, params)?;
        // convergence of the current iterate, from the same norms the
        // projection uses
        let mut num = 0f64;
        for (i, ((p, z), &m)) in proj.data.iter_mut().zip(&est.data).zip(target).enumerate() {
            let n = magnitude(*z);
            let d = n as f64 - m as f64;
            num += two_sided_weight(i % bins, bins) * d * d;
            *p = if n > 0.0 {
                *z * (m / n)
            } else {
                Complex32::new(m, 0.0)
            };
        }
        trace.push(if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        });
        x = istft_with(&proj, &window, &inv_norm);
    }
    trace.push(spectral_convergence(&stft_samples(&x, params)?, target));
    Ok((x, trace))
}

/// Mel spectrogram (`[n_mels × frames]`) back to audio: pseudo-inverse to a
/// linear magnitude, then Griffin-Lim from zero phase.
pub fn griffin_lim(
    mel: &[f32],
    frames: usize,
    fb: &MelFilterbank,
    params: &StftParams,
    iters: usize,
) -> Result<AudioClip> {
    if mel.len() != fb.n_mels * frames {
        return Err(SpectralError::Shape(format!(
            "mel has {} values, expected {}×{frames}",
            mel.len(),
            fb.n_mels
        )));
    }
    let lin = fb.pseudo_inverse(mel, frames);
    let (x, _) = griffin_lim_magnitude(&lin, frames, params, iters)?;
    Ok(AudioClip::mono(x, params.sample_rate)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, n: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn tone(freq: f64, rate: u32, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin() as f32 * 0.5)
            .collect()
    }

    #[test]
    fn stft_adjoint_satisfies_inner_product_identity() {
        let params = StftParams::new(512, 128, 16000).unwrap();
        let x = noise(11, 3000);
        let fx = stft_samples(&x, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = ComplexStft {
            params,
            frames: fx.frames,
            data: (0..fx.data.len())
                .map(|_| Complex32::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        };
        let lhs: f64 = fx
            .data
            .iter()
            .zip(&g.data)
            .map(|(a, b)| (a.re * b.re + a.im * b.im) as f64)
            .sum();
        let adj = stft_adjoint(&g, x.len()).unwrap();
        let rhs: f64 = x.iter().zip(&adj).map(|(a, b)| (*a * *b) as f64).sum();
        assert!(
            (lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0),
            "{lhs} vs {rhs}"
        );
    }

    /// O(n²) DFT of one windowed frame, independent of the FFT path.
    fn naive_frame(seg: &[f32], window: &[f32], k: usize) -> (f64, f64) {
        let n = seg.len();
        let (mut re, mut im) = (0f64, 0f64);
        for i in 0..n {
            let v = seg[i] as f64 * window[i] as f64;
            let ph = -2.0 * PI * ((k * i) % n) as f64 / n as f64;
            re += v * ph.cos();
            im += v * ph.sin();
        }
        (re, im)
    }

    #[test]
    fn default_params_give_128_centred_frames() {
        let p = StftParams::default();
        assert_eq!(p.frames_for(35280 + 2048), 128);
        assert_eq!(p.bins_below(16000.0), 743);
    }

    #[test]
    fn zero_signal_zero_spectrum() {
        let p = StftParams::default();
        let s = stft_samples(&vec![0.0; 8192], &p).unwrap();
        assert!(s.data.iter().all(|z| z.norm() == 0.0));
        assert!(istft_samples(&s).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tone_peaks_at_expected_bin() {
        let p = StftParams::default();
        let s = stft_samples(&tone(1000.0, 44100, 44100), &p).unwrap();
        for t in 0..s.frames {
            let f = s.frame(t);
            let k = (0..f.len())
                .max_by(|&a, &b| f[a].norm().total_cmp(&f[b].norm()))
                .unwrap();
            assert_eq!(k, 46);
        }
    }

    #[test]
    fn stft_matches_naive_dft() {
        let p = StftParams::default();
        let x = noise(5, 8192);
        let s = stft_samples(&x, &p).unwrap();
        let w = p.window();
        let mut worst = 0f64;
        for t in (0..s.frames).step_by(5) {
            for k in 0..p.bins() {
                let (re, im) = naive_frame(&x[t * p.hop..t * p.hop + p.n_fft], &w, k);
                let z = s.frame(t)[k];
                worst = worst
                    .max((z.re as f64 - re).abs())
                    .max((z.im as f64 - im).abs());
            }
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn parseval_per_frame() {
        let p = StftParams::new(512, 128, 16000).unwrap();
        let x = noise(9, 4096);
        let s = stft_samples(&x, &p).unwrap();
        let w = p.window();
        for t in 0..s.frames {
            let energy: f64 = (0..p.n_fft)
                .map(|i| (x[t * p.hop + i] * w[i]) as f64)
                .map(|v| v * v)
                .sum::<f64>()
                * p.n_fft as f64;
            let spec: f64 = s
                .frame(t)
                .iter()
                .enumerate()
                .map(|(k, z)| two_sided_weight(k, p.bins()) * z.norm_sqr() as f64)
                .sum();
            assert!((spec - energy).abs() / energy < 1e-4);
        }
    }

    #[test]
    fn istft_inverts_stft_on_interior() {
        let p = StftParams::default();
        let x = noise(1, 44100);
        let y = istft_samples(&stft_samples(&x, &p).unwrap()).unwrap();
        let worst = (p.n_fft..y.len() - p.n_fft)
            .map(|i| (x[i] - y[i]).abs())
            .fold(0f32, f32::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn istft_is_linear() {
        let p = StftParams::new(512, 128, 16000).unwrap();
        let x = noise(2, 4096);
        let mut s = stft_samples(&x, &p).unwrap();
        let y1 = istft_samples(&s).unwrap();
        s.scale(2.0);
        let y2 = istft_samples(&s).unwrap();
        for (a, b) in y1.iter().zip(&y2) {
            assert!((2.0 * a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(StftParams::new(2048, 4096, 44100).is_err());
        assert!(StftParams::new(1000, 100, 44100).is_err());
        let p = StftParams::default();
        assert!(matches!(
            stft_samples(&[0.0; 100], &p),
            Err(SpectralError::TooShort { .. })
        ));
    }

    #[test]
    fn db_conversion_values() {
        let v = amplitude_to_db(&[1.0, 0.0, 0.1]).unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], -80.0);
        assert!((v[2] + 20.0).abs() < 1e-5);
        assert!(amplitude_to_db(&[-1.0]).is_err());
    }

    #[test]
    fn representation_of_unit_and_zero() {
        let p = StftParams::new(4, 4, 8).unwrap();
        let mut s = ComplexStft::zeros(p, 1);
        s.data[0] = Complex32::new(1.0, 0.0);
        let amp = to_representation(&s, RepresentationKind::Amplitude).unwrap();
        let ph = to_representation(&s, RepresentationKind::Phase).unwrap();
        assert_eq!(amp.at(0, 0, 0), 0.0);
        assert_eq!(amp.at(0, 1, 0), -80.0);
        assert_eq!(ph.at(0, 0, 0), 0.0);
        assert_eq!(ph.at(0, 1, 0), 0.0);
        s.data[2] = Complex32::new(-1.0, -0.0);
        let ph = to_representation(&s, RepresentationKind::Phase).unwrap();
        assert!(ph.at(0, 2, 0) > 0.0, "−π maps to +π");
        assert!(matches!(
            to_representation(&s, RepresentationKind::Waveform),
            Err(SpectralError::WaveformFromSpectrogram)
        ));
    }

    #[test]
    fn polar_is_amplitude_stacked_with_phase() {
        let p = StftParams::new(256, 64, 8000).unwrap();
        let s = stft_samples(&noise(4, 2048), &p).unwrap();
        let amp = to_representation(&s, RepresentationKind::Amplitude).unwrap();
        let ph = to_representation(&s, RepresentationKind::Phase).unwrap();
        let polar = to_representation(&s, RepresentationKind::Polar).unwrap();
        assert_eq!(polar.channels, 2);
        assert_eq!(polar.channel(0), amp.channel(0));
        assert_eq!(polar.channel(1), ph.channel(0));
        let cx = to_representation(&s, RepresentationKind::Complex).unwrap();
        assert_eq!(cx.at(0, 3, 2), s.frame(2)[3].re);
        assert_eq!(cx.at(1, 3, 2), s.frame(2)[3].im);
        assert!(ph
            .data
            .iter()
            .all(|&v| v > -std::f32::consts::PI && v <= std::f32::consts::PI));
    }

    #[test]
    fn crop_keeps_low_bins() {
        let p = StftParams::default();
        let s = stft_samples(&noise(8, 6000), &p).unwrap();
        let amp = to_representation(&s, RepresentationKind::Polar).unwrap();
        let c = amp.crop_bins(743);
        assert_eq!((c.channels, c.bins, c.frames), (2, 743, amp.frames));
        assert_eq!(c.at(1, 742, 3), amp.at(1, 742, 3));
    }

    #[test]
    fn mel_filterbank_shape_and_support() {
        let p = StftParams::default();
        for n_mels in [256, 512] {
            let fb = mel_filterbank(n_mels, &p, 0.0, 22050.0).unwrap();
            assert_eq!((fb.n_mels, fb.bins), (n_mels, 1025));
            assert!(fb.matrix.iter().all(|&w| w >= 0.0));
            for m in 0..n_mels {
                let row = fb.row(m);
                let nz: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
                assert!(!nz.is_empty(), "row {m} empty");
                // one contiguous interval
                assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len());
            }
            assert!(fb.centers_hz.windows(2).all(|w| w[1] > w[0]));
            // every interior bin in the band is covered
            for k in 1..fb.bins - 1 {
                assert!((0..n_mels).any(|m| fb.row(m)[k] > 0.0), "bin {k} uncovered");
            }
        }
        assert!(mel_filterbank(64, &p, 100.0, 30000.0).is_err());
        assert!(mel_filterbank(64, &p, 500.0, 100.0).is_err());
    }

    #[test]
    fn mel_of_flat_spectrum_is_row_sums() {
        let p = StftParams::new(512, 128, 16000).unwrap();
        let fb = mel_filterbank(40, &p, 0.0, 8000.0).unwrap();
        let ones = vec![1f32; fb.bins];
        let mel = fb.apply(&ones, 1);
        for m in 0..40 {
            let sum: f32 = fb.row(m).iter().sum();
            assert!((mel[m] - sum).abs() < 1e-5);
        }
        let back = fb.pseudo_inverse(&mel, 1);
        for v in &back[1..fb.bins - 1] {
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn griffin_lim_zero_input() {
        let p = StftParams::new(512, 128, 16000).unwrap();
        let fb = mel_filterbank(64, &p, 0.0, 8000.0).unwrap();
        let out = griffin_lim(&vec![0.0; 64 * 10], 10, &fb, &p, 4).unwrap();
        assert!(out.channel(0).iter().all(|&v| v == 0.0));
        assert!(matches!(
            griffin_lim(&vec![0.0; 640], 10, &fb, &p, 0),
            Err(SpectralError::ZeroIterations)
        ));
    }

    #[test]
    fn griffin_lim_objective_is_monotone_and_tone_survives() {
        let p = StftParams::new(2048, 512, 44100).unwrap();
        let x = tone(440.0, 44100, 44100);
        let s = stft_samples(&x, &p).unwrap();
        let mag = s.magnitudes();
        let (y, trace) = griffin_lim_magnitude(&mag, s.frames, &p, 32).unwrap();
        assert_eq!(trace.len(), 33);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-6), "{trace:?}");
        }
        let sy = stft_samples(&y, &p).unwrap();
        let mid = sy.frame(sy.frames / 2);
        let k = (0..mid.len())
            .max_by(|&a, &b| mid[a].norm().total_cmp(&mid[b].norm()))
            .unwrap();
        assert!((p.bin_hz(k) - 440.0).abs() <= p.bin_hz(1));
    }
}
