use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::audio_io::{mix_to_mono, AudioClip};
use crate::spectral::{
    stft_samples, to_representation, RepresentationKind, Spectrogram, StftParams,
};

pub const CUTOFF_HZ: f64 = 16000.0;
pub const GAIN_RANGE_DB: f64 = 6.0;
pub const BUTTERWORTH_ORDER: usize = 10;

/// Random mono mix with weights `(w, 1 − w)`, `w ~ U[0, 1]`, then a random
/// gain drawn uniformly in decibels. Mono input skips the mix.
pub fn augment<R: Rng>(clip: &AudioClip, rng: &mut R) -> Result<AudioClip, DatasetError> {
    let mono = match clip.channels() {
        1 => clip.clone(),
        2 => {
            let w: f32 = rng.gen_range(0.0..=1.0);
            mix_to_mono(clip, &[w, 1.0 - w])?
        }
        n => {
            return Err(DatasetError::Invalid(format!(
                "cannot augment {n}-channel audio"
            )))
        }
    };
    let gain_db = rng.gen_range(-GAIN_RANGE_DB..=GAIN_RANGE_DB);
    Ok(apply_gain(&mono, gain_db))
}

/// The deterministic counterpart of [`augment`]: equal-weight mono mix and
/// unit gain.
pub fn plain_mono(clip: &AudioClip) -> Result<AudioClip, DatasetError> {
    match clip.channels() {
        1 => Ok(clip.clone()),
        n => {
            let w = vec![1.0 / n as f32; n];
            Ok(mix_to_mono(clip, &w)?)
        }
    }
}

pub fn apply_gain(clip: &AudioClip, gain_db: f64) -> AudioClip {
    let g = 10f64.powf(gain_db / 20.0) as f32;
    clip.map_channels(clip.sample_rate(), |c| c.iter().map(|&s| s * g).collect())
        .expect("same shape")
}

/// Digital Butterworth low-pass as cascaded biquads `[b0, b1, b2, a1, a2]`,
/// designed by the bilinear transform with frequency prewarping.
pub fn butterworth_lowpass(order: usize, cutoff_hz: f64, sample_rate: f64) -> Vec<[f64; 5]> {
    assert!(order >= 2 && order % 2 == 0, "even order required");
    assert!(cutoff_hz > 0.0 && cutoff_hz < sample_rate / 2.0);
    let fs2 = 2.0 * sample_rate;
    let wc = fs2 * (std::f64::consts::PI * cutoff_hz / sample_rate).tan();
    (0..order / 2)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            let (pr, pi) = (wc * theta.cos(), wc * theta.sin());
            // z = (fs2 + p) / (fs2 − p)
            let (nr, ni) = (fs2 + pr, pi);
            let (dr, di) = (fs2 - pr, -pi);
            let d = dr * dr + di * di;
            let zr = (nr * dr + ni * di) / d;
            let zi = (ni * dr - nr * di) / d;
            let a1 = -2.0 * zr;
            let a2 = zr * zr + zi * zi;
            let g = (1.0 + a1 + a2) / 4.0;
            [g, 2.0 * g, g, a1, a2]
        })
        .collect()
}

fn sos_pass(sections: &[[f64; 5]], x: &mut [f64]) {
    for s in sections {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let y = s[0] * *v + z1;
            z1 = s[1] * *v - s[3] * y + z2;
            z2 = s[2] * *v - s[4] * y;
            *v = y;
        }
    }
}

/// Zero-phase filtering (forward then backward) with odd reflection padding
/// at both ends to suppress start-up transients.
pub fn filtfilt(sections: &[[f64; 5]], x: &[f32]) -> Vec<f32> {
    if x.is_empty() {
        return Vec::new();
    }
    let pad = (6 * sections.len() + 3).min(x.len() - 1);
    let n = x.len();
    let mut buf: Vec<f64> = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (x[0] as f64, x[n - 1] as f64);
    for i in (1..=pad).rev() {
        buf.push(2.0 * first - x[i] as f64);
    }
    buf.extend(x.iter().map(|&v| v as f64));
    for i in 1..=pad {
        buf.push(2.0 * last - x[n - 1 - i] as f64);
    }
    sos_pass(sections, &mut buf);
    buf.reverse();
    sos_pass(sections, &mut buf);
    buf.reverse();
    buf[pad..pad + n].iter().map(|&v| v as f32).collect()
}

/// Settings for turning a mono snippet into a detector input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub kind: RepresentationKind,
    pub stft: StftParams,
    pub cutoff_hz: f64,
}

impl Preprocess {
    pub fn new(kind: RepresentationKind, stft: StftParams) -> Self {
        Self {
            kind,
            stft,
            cutoff_hz: CUTOFF_HZ,
        }
    }

    /// Frequency bins kept by the cutoff for spectral kinds.
    pub fn kept_bins(&self) -> usize {
        self.stft.bins_below(self.cutoff_hz)
    }

    /// Input tensor shape `[channels, height, width]` for one item.
    pub fn item_shape(&self, samples: usize) -> [usize; 3] {
        if self.kind.is_spectral() {
            [
                self.kind.input_channels(),
                self.kept_bins(),
                self.stft.frames_for(samples),
            ]
        } else {
            [1, 1, samples]
        }
    }

    /// Cutoff and representation conversion of a mono clip.
    pub fn apply(&self, mono: &AudioClip) -> Result<Spectrogram, DatasetError> {
        if mono.channels() != 1 {
            return Err(DatasetError::Invalid(
                "preprocessing expects mono audio".into(),
            ));
        }
        if self.kind.is_spectral() {
            let spec = stft_samples(mono.channel(0), &self.stft)?;
            Ok(to_representation(&spec, self.kind)?.crop_bins(self.kept_bins()))
        } else {
            let sos =
                butterworth_lowpass(BUTTERWORTH_ORDER, self.cutoff_hz, mono.sample_rate() as f64);
            Ok(Spectrogram::waveform(
                filtfilt(&sos, mono.channel(0)),
                self.stft,
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn tone(freq: f64, n: usize, amp: f32) -> Vec<f32> {
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / 44100.0).sin() as f32)
            .collect()
    }

    /// Direct evaluation of the cascade's frequency response.
    fn response_db(sos: &[[f64; 5]], f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let mut mag = 1.0;
        for s in sos {
            let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
            let nr = s[0] + s[1] * c1 + s[2] * c2;
            let ni = -(s[1] * s1 + s[2] * s2);
            let dr = 1.0 + s[3] * c1 + s[4] * c2;
            let di = -(s[3] * s1 + s[4] * s2);
            mag *= ((nr * nr + ni * ni) / (dr * dr + di * di)).sqrt();
        }
        20.0 * mag.log10()
    }

    #[test]
    fn butterworth_response_shape() {
        let sos = butterworth_lowpass(10, 16000.0, 44100.0);
        assert_eq!(sos.len(), 5);
        assert!(response_db(&sos, 0.0, 44100.0).abs() < 1e-9);
        assert!((response_db(&sos, 16000.0, 44100.0) + 3.0103).abs() < 1e-3);
        assert!(response_db(&sos, 1000.0, 44100.0).abs() < 1e-6);
        // one pass alone falls short of 40 dB at 18 kHz; the zero-phase pair doubles it
        let one = response_db(&sos, 18000.0, 44100.0);
        assert!(one < -30.0 && 2.0 * one < -40.0);
    }

    #[test]
    fn waveform_cutoff_attenuates_18k_by_40db() {
        let n = 44100;
        let x = tone(18000.0, n, 0.5);
        let pre = Preprocess::new(RepresentationKind::Waveform, StftParams::default());
        let y = pre
            .apply(&AudioClip::mono(x.clone(), 44100).unwrap())
            .unwrap();
        // energy above 16 kHz by direct DFT over the interior
        let band_energy = |v: &[f32]| -> f64 {
            let seg = &v[2000..2000 + 8192];
            let mut e = 0.0;
            for k in (16000 * 8192 / 44100 + 1)..4096 {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &s) in seg.iter().enumerate() {
                    let a = 2.0 * PI * (k * i) as f64 / 8192.0;
                    re += s as f64 * a.cos();
                    im -= s as f64 * a.sin();
                }
                e += re * re + im * im;
            }
            e
        };
        let ratio = band_energy(&y.data) / band_energy(&x);
        assert!(10.0 * ratio.log10() <= -40.0, "{}", 10.0 * ratio.log10());
    }

    #[test]
    fn spectral_cutoff_keeps_743_bins() {
        let pre = Preprocess::new(RepresentationKind::Amplitude, StftParams::default());
        assert_eq!(pre.kept_bins(), 743);
        let x = tone(18000.0, StftParams::default().span(128), 0.5);
        let s = pre.apply(&AudioClip::mono(x, 44100).unwrap()).unwrap();
        assert_eq!((s.channels, s.bins, s.frames), (1, 743, 128));
        assert_eq!(
            pre.item_shape(StftParams::default().span(128)),
            [1, 743, 128]
        );
    }

    #[test]
    fn identical_channels_mix_to_scaled_channel() {
        let ch = tone(440.0, 4410, 0.3);
        let clip = AudioClip::new(vec![ch.clone(), ch.clone()], 44100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let out = augment(&clip, &mut rng).unwrap();
            let g = out.channel(0)[100] / ch[100];
            for (a, b) in out.channel(0).iter().zip(&ch) {
                assert!((a - g * b).abs() < 1e-5);
            }
            assert!((0.5..=2.0).contains(&g));
        }
    }

    #[test]
    fn six_db_gain() {
        let clip = AudioClip::mono(vec![0.3], 44100).unwrap();
        let out = apply_gain(&clip, 6.0);
        assert!((out.channel(0)[0] - 0.5986).abs() < 1e-3);
    }
}
