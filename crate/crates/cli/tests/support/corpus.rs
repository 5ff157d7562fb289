//! Procedural stereo music used as the local corpus in integration tests.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use aimd_core::audio_io::{write_wav, AudioClip, WavEncoding};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SAMPLE_RATE: u32 = 44100;

struct Voice {
    harmonics: Vec<f64>,
    attack: f64,
    decay: f64,
    vibrato: f64,
    pan: f64,
    gain: f64,
}

impl Voice {
    fn random(rng: &mut ChaCha8Rng, bright: f64) -> Self {
        let n = rng.gen_range(3..14);
        let roll = rng.gen_range(0.6..1.6) / bright;
        let harmonics = (1..=n)
            .map(|k| rng.gen_range(0.5..1.0) / (k as f64).powf(roll))
            .collect();
        Voice {
            harmonics,
            attack: rng.gen_range(0.002..0.08),
            decay: rng.gen_range(0.15..1.5),
            vibrato: rng.gen_range(0.0..0.006),
            pan: rng.gen_range(0.15..0.85),
            gain: rng.gen_range(0.3..1.0),
        }
    }

    fn render(
        &self,
        out: &mut [Vec<f64>; 2],
        start: usize,
        len: usize,
        freq: f64,
        vel: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let sr = SAMPLE_RATE as f64;
        let vib_rate = rng.gen_range(4.0..6.5);
        let phase0: Vec<f64> = self
            .harmonics
            .iter()
            .map(|_| rng.gen_range(0.0..2.0 * PI))
            .collect();
        let (l, r) = ((1.0 - self.pan).sqrt(), self.pan.sqrt());
        let end = (start + len).min(out[0].len());
        let mut phase = 0.0;
        for i in start..end {
            let t = (i - start) as f64 / sr;
            let env = (t / self.attack).min(1.0) * (-t / self.decay).exp();
            let f = freq * (1.0 + self.vibrato * (2.0 * PI * vib_rate * t).sin());
            phase += 2.0 * PI * f / sr;
            let mut s = 0.0;
            for (k, (&a, &p0)) in self.harmonics.iter().zip(&phase0).enumerate() {
                if f * (k + 1) as f64 >= sr / 2.0 {
                    break;
                }
                s += a * ((k + 1) as f64 * phase + p0).sin();
            }
            let v = s * env * vel * self.gain;
            out[0][i] += v * l;
            out[1][i] += v * r;
        }
    }
}

fn midi_hz(n: f64) -> f64 {
    440.0 * 2f64.powf((n - 69.0) / 12.0)
}

fn one_pole_lowpass(x: &mut [f64], cutoff: f64) {
    let a = (-2.0 * PI * cutoff / SAMPLE_RATE as f64).exp();
    let mut y = 0.0;
    for v in x.iter_mut() {
        y = (1.0 - a) * *v + a * y;
        *v = y;
    }
}

fn drums(out: &mut [Vec<f64>; 2], beat: usize, bars: usize, rng: &mut ChaCha8Rng) {
    let sr = SAMPLE_RATE as f64;
    let n = out[0].len();
    let kick_gain = rng.gen_range(0.3..0.9);
    let snare_gain = rng.gen_range(0.1..0.5);
    let hat_gain = rng.gen_range(0.02..0.2);
    let hat_pan = rng.gen_range(0.3..0.7);
    for b in 0..bars * 4 {
        let start = b * beat;
        if start >= n {
            break;
        }
        if b % 2 == 0 || rng.gen_bool(0.15) {
            let mut ph = 0.0;
            for i in start..(start + beat).min(n) {
                let t = (i - start) as f64 / sr;
                let f = 50.0 + 90.0 * (-t * 30.0).exp();
                ph += 2.0 * PI * f / sr;
                let v = kick_gain * ph.sin() * (-t * 8.0).exp();
                out[0][i] += v;
                out[1][i] += v;
            }
        }
        if b % 4 == 1 || b % 4 == 3 {
            let len = (0.25 * sr) as usize;
            let mut noise: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            one_pole_lowpass(&mut noise, rng.gen_range(3000.0..9000.0));
            for (j, &s) in noise.iter().enumerate() {
                let i = start + j;
                if i >= n {
                    break;
                }
                let t = j as f64 / sr;
                let v = snare_gain * (s + 0.3 * (2.0 * PI * 190.0 * t).sin()) * (-t * 18.0).exp();
                out[0][i] += v;
                out[1][i] += v;
            }
        }
        for half in 0..2 {
            let hs = start + half * beat / 2;
            let len = (0.05 * sr) as usize;
            let mut prev = 0.0;
            for j in 0..len {
                let i = hs + j;
                if i >= n {
                    break;
                }
                let w: f64 = rng.gen_range(-1.0..1.0);
                let hp = w - prev;
                prev = w;
                let v = hat_gain * hp * (-(j as f64 / sr) * 60.0).exp();
                out[0][i] += v * (1.0 - hat_pan);
                out[1][i] += v * hat_pan;
            }
        }
    }
}

/// One stereo track: chords, bass, melody and drums in a random key and
/// tempo, with per-track timbre variation.
pub fn synth_track(seed: u64, seconds: f64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let mut out = [vec![0f64; n], vec![0f64; n]];
    let bpm: f64 = rng.gen_range(70.0..150.0);
    let beat = (60.0 / bpm * SAMPLE_RATE as f64) as usize;
    let root = rng.gen_range(40..52) as f64;
    let minor = rng.gen_bool(0.5);
    let scale: [f64; 7] = if minor {
        [0.0, 2.0, 3.0, 5.0, 7.0, 8.0, 10.0]
    } else {
        [0.0, 2.0, 4.0, 5.0, 7.0, 9.0, 11.0]
    };
    let bright = rng.gen_range(0.6..1.5);
    let pad = Voice::random(&mut rng, bright);
    let bass = Voice::random(&mut rng, bright * 0.7);
    let lead = Voice::random(&mut rng, bright);
    let progression: Vec<usize> = (0..4).map(|_| rng.gen_range(0..7)).collect();
    let bars = n / (4 * beat) + 1;
    let with_drums = rng.gen_bool(0.8);
    let lead_density = rng.gen_range(0.3..0.9);
    for bar in 0..bars {
        let degree = progression[bar % 4];
        let start = bar * 4 * beat;
        for (k, step) in [0usize, 2, 4].iter().enumerate() {
            let d = degree + step;
            let note = root + 12.0 + scale[d % 7] + 12.0 * (d / 7) as f64;
            let vel = 0.25 + 0.05 * k as f64;
            pad.render(&mut out, start, 4 * beat, midi_hz(note), vel, &mut rng);
        }
        for b in 0..4 {
            let note = root - 12.0 + scale[degree % 7] + if b % 2 == 1 { 7.0 } else { 0.0 };
            bass.render(
                &mut out,
                start + b * beat,
                beat,
                midi_hz(note),
                0.5,
                &mut rng,
            );
        }
        for e in 0..8 {
            if rng.gen_bool(lead_density) {
                let d = rng.gen_range(0..14);
                let note = root + 24.0 + scale[d % 7] + 12.0 * (d / 7) as f64;
                let vel = rng.gen_range(0.2..0.5);
                lead.render(
                    &mut out,
                    start + e * beat / 2,
                    beat,
                    midi_hz(note),
                    vel,
                    &mut rng,
                );
            }
        }
    }
    if with_drums {
        drums(&mut out, beat, bars, &mut rng);
    }
    let floor = rng.gen_range(1e-4..2e-3);
    for ch in out.iter_mut() {
        for v in ch.iter_mut() {
            *v += floor * rng.gen_range(-1.0..1.0);
        }
    }
    let peak = out
        .iter()
        .flatten()
        .fold(0f64, |m, v| m.max(v.abs()))
        .max(1e-9);
    let target = rng.gen_range(0.4..0.9);
    let [l, r] = out;
    let scale = |c: Vec<f64>| c.into_iter().map(|v| (v / peak * target) as f32).collect();
    AudioClip::new(vec![scale(l), scale(r)], SAMPLE_RATE).unwrap()
}

/// Writes `count` tracks of `seconds` each as 16-bit WAV files into `dir`,
/// skipping files that already exist.
pub fn write_corpus(dir: &Path, count: usize, seconds: f64, seed: u64) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    (0..count)
        .map(|i| {
            let path = dir.join(format!("track{i:03}.wav"));
            if !path.exists() {
                let clip =
                    synth_track(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), seconds);
                let tmp = path.with_extension("tmp");
                write_wav(&clip, &tmp, WavEncoding::Pcm16).unwrap();
                std::fs::rename(&tmp, &path).unwrap();
            }
            path
        })
        .collect()
}
