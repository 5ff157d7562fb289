//! Toy neural codec: four strided 1-D convolutions down to a tanh bottleneck,
//! a uniform scalar quantizer, and four mirrored transposed convolutions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use realfft::num_complex::Complex32;
use serde::{Deserialize, Serialize};

use super::ReconError;
use crate::audio_io::AudioClip;
use crate::nn::layers::{self, ConvGeom, ConvTransposeGeom};
use crate::nn::{
    adam_step, read_checkpoint, write_checkpoint, AdamConfig, AdamState, ParamSet, Real, Tensor,
};
use crate::spectral::{magnitude, stft_adjoint, stft_samples, ComplexStft, StftParams};

pub const ENCODER_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const KERNEL: usize = 9;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 4;
pub const TOTAL_STRIDE: usize = 16;

const CHUNK: usize = 65536;
/// Wider than the encoder–decoder receptive field.
const CONTEXT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressionLevel {
    Low,
    Mid,
    High,
}

impl CompressionLevel {
    pub const ALL: [CompressionLevel; 3] = [Self::Low, Self::Mid, Self::High];

    /// Quantizer level count. `High` keeps the most information.
    pub fn levels(self) -> usize {
        match self {
            Self::Low => 16,
            Self::Mid => 64,
            Self::High => 256,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Mid => "mid",
            Self::High => "high",
        }
    }
}

impl std::fmt::Display for CompressionLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CompressionLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "low" => Ok(Self::Low),
            "mid" => Ok(Self::Mid),
            "high" => Ok(Self::High),
            other => Err(format!("unknown compression level '{other}'")),
        }
    }
}

/// Uniform mid-rise quantizer on [−1, 1] with `levels` output values.
pub fn quantize<T: Real>(z: T, levels: usize) -> T {
    let steps = T::from_usize(levels - 1).unwrap();
    let two = T::lit(2.0);
    let idx = ((z + T::one()) / two * steps)
        .round()
        .max(T::zero())
        .min(steps);
    idx * two / steps - T::one()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCodec<T = f32> {
    pub level: CompressionLevel,
    pub tensors: ParamSet<T>,
}

fn enc_geom(i: usize, len: usize) -> ConvGeom {
    let c_in = if i == 0 { 1 } else { ENCODER_CHANNELS[i - 1] };
    ConvGeom {
        c_in,
        c_out: ENCODER_CHANNELS[i],
        h: 1,
        w: len,
        kh: 1,
        kw: KERNEL,
        sh: 1,
        sw: STRIDE,
        ph: 0,
        pw: PADDING,
    }
}

fn dec_channels(j: usize) -> (usize, usize) {
    let c_in = ENCODER_CHANNELS[3 - j];
    let c_out = if j == 3 { 1 } else { ENCODER_CHANNELS[2 - j] };
    (c_in, c_out)
}

fn dec_geom(j: usize, len: usize) -> ConvTransposeGeom {
    let (c_in, c_out) = dec_channels(j);
    ConvTransposeGeom {
        c_in,
        c_out,
        h: 1,
        w: len,
        kh: 1,
        kw: KERNEL,
        sh: 1,
        sw: STRIDE,
        ph: 0,
        pw: PADDING,
        oph: 0,
        opw: 1,
    }
}

struct Tape<T> {
    enc_cols: Vec<Vec<T>>,
    enc_out: Vec<Vec<T>>,
    dec_in: Vec<Vec<T>>,
    dec_out: Vec<Vec<T>>,
    len: usize,
}

impl<T: Real> ToyCodec<T> {
    pub fn param_shapes() -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for i in 0..4 {
            let g = enc_geom(i, 16);
            out.push((format!("enc{i}.weight"), vec![g.c_out, g.c_in, 1, KERNEL]));
            out.push((format!("enc{i}.bias"), vec![g.c_out]));
        }
        for j in 0..4 {
            let (c_in, c_out) = dec_channels(j);
            out.push((format!("dec{j}.weight"), vec![c_in, c_out, 1, KERNEL]));
            out.push((format!("dec{j}.bias"), vec![c_out]));
        }
        out
    }

    pub fn init(level: CompressionLevel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = ParamSet::new();
        for (name, shape) in Self::param_shapes() {
            let mut t = Tensor::zeros(&shape);
            if name.ends_with(".weight") {
                // a stride-2 transposed conv sees half its taps per output
                let fan_in = if name.starts_with("dec") {
                    shape[0] * KERNEL / STRIDE
                } else {
                    shape[1] * KERNEL
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in t.data_mut() {
                    *v = T::lit(rng.gen_range(-bound..bound));
                }
            }
            tensors.insert(name, t);
        }
        Self { level, tensors }
    }

    fn w(&self, name: &str) -> &[T] {
        self.tensors[name].data()
    }

    /// Encodes and decodes `x`, whose length must be a multiple of the total
    /// stride.
    fn run(&self, x: &[T], quantized: bool, keep: bool) -> (Vec<T>, Option<Tape<T>>) {
        debug_assert_eq!(x.len() % TOTAL_STRIDE, 0);
        let mut tape = Tape {
            enc_cols: Vec::new(),
            enc_out: Vec::new(),
            dec_in: Vec::new(),
            dec_out: Vec::new(),
            len: x.len(),
        };
        let mut act = x.to_vec();
        let mut len = x.len();
        let mut col = Vec::new();
        for i in 0..4 {
            let g = enc_geom(i, len);
            let mut y = layers::conv2d_forward(
                &g,
                &act,
                self.w(&format!("enc{i}.weight")),
                self.w(&format!("enc{i}.bias")),
                &mut col,
            );
            if i < 3 {
                layers::relu_inplace(&mut y);
            } else {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            if keep {
                tape.enc_cols.push(std::mem::take(&mut col));
                tape.enc_out.push(y.clone());
            }
            act = y;
            len /= STRIDE;
        }
        if quantized {
            let levels = self.level.levels();
            act.iter_mut().for_each(|v| *v = quantize(*v, levels));
        }
        for j in 0..4 {
            let g = dec_geom(j, len);
            let mut y = layers::conv_transpose2d_forward(
                &g,
                &act,
                self.w(&format!("dec{j}.weight")),
                self.w(&format!("dec{j}.bias")),
            );
            if j < 3 {
                layers::relu_inplace(&mut y);
            }
            if keep {
                tape.dec_in.push(std::mem::replace(&mut act, Vec::new()));
                tape.dec_out.push(y.clone());
            }
            act = y;
            len *= STRIDE;
        }
        (act, keep.then_some(tape))
    }

    /// Accumulates parameter gradients for output gradient `dy`. The
    /// quantizer passes gradients straight through.
    fn backward(&self, tape: Tape<T>, dy: Vec<T>, grads: &mut ParamSet<T>) {
        let mut d = dy;
        let mut len = tape.len;
        for j in (0..4).rev() {
            if j < 3 {
                layers::relu_backward_inplace(&tape.dec_out[j], &mut d);
            }
            len /= STRIDE;
            let g = dec_geom(j, len);
            let wname = format!("dec{j}.weight");
            let bname = format!("dec{j}.bias");
            let mut dw = grads.remove(&wname).unwrap();
            let mut db = grads.remove(&bname).unwrap();
            d = layers::conv_transpose2d_backward(
                &g,
                &tape.dec_in[j],
                self.w(&wname),
                &d,
                dw.data_mut(),
                db.data_mut(),
                true,
            )
            .unwrap();
            grads.insert(wname, dw);
            grads.insert(bname, db);
        }
        for i in (0..4).rev() {
            let out = &tape.enc_out[i];
            if i < 3 {
                layers::relu_backward_inplace(out, &mut d);
            } else {
                for (dv, &t) in d.iter_mut().zip(out) {
                    *dv *= T::one() - t * t;
                }
            }
            len *= STRIDE;
            let g = enc_geom(i, len);
            let wname = format!("enc{i}.weight");
            let bname = format!("enc{i}.bias");
            let mut dw = grads.remove(&wname).unwrap();
            let mut db = grads.remove(&bname).unwrap();
            let dx = layers::conv2d_backward(
                &g,
                &tape.enc_cols[i],
                self.w(&wname),
                &d,
                dw.data_mut(),
                db.data_mut(),
                i > 0,
            );
            grads.insert(wname, dw);
            grads.insert(bname, db);
            if let Some(dx) = dx {
                d = dx;
            }
        }
    }

    fn zero_grads(&self) -> ParamSet<T> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect()
    }
}

impl ToyCodec<f32> {
    /// Encode→quantize→decode of a mono signal of any length, processed in
    /// fixed-size chunks with zero-padded context so results do not depend
    /// on where the signal starts.
    pub fn process(&self, x: &[f32]) -> Vec<f32> {
        let mut out = vec![0f32; x.len()];
        let span = CHUNK + 2 * CONTEXT;
        let starts: Vec<usize> = (0..x.len()).step_by(CHUNK).collect();
        let pieces: Vec<(usize, Vec<f32>)> = starts
            .par_iter()
            .map(|&start| {
                let mut buf = vec![0f32; span];
                let lo = start as isize - CONTEXT as isize;
                for (i, b) in buf.iter_mut().enumerate() {
                    let src = lo + i as isize;
                    if src >= 0 && (src as usize) < x.len() {
                        *b = x[src as usize];
                    }
                }
                let (y, _) = self.run(&buf, true, false);
                (start, y)
            })
            .collect();
        for (start, y) in pieces {
            let n = CHUNK.min(x.len() - start);
            out[start..start + n].copy_from_slice(&y[CONTEXT..CONTEXT + n]);
        }
        out
    }

    pub fn reconstruct(&self, clip: &AudioClip) -> Result<AudioClip, ReconError> {
        Ok(clip.map_channels(clip.sample_rate(), |c| self.process(c))?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ReconError> {
        let desc = serde_json::json!({
            "model": "toycodec",
            "level": self.level,
            "channels": ENCODER_CHANNELS,
            "kernel": KERNEL,
            "stride": STRIDE,
        });
        Ok(write_checkpoint(path, &desc, &self.tensors)?)
    }

    pub fn load(path: &Path) -> Result<Self, ReconError> {
        let (desc, tensors) = read_checkpoint(path)?;
        let bad = |detail: String| ReconError::BadCheckpoint {
            path: path.to_path_buf(),
            detail,
        };
        if desc.get("model").and_then(|m| m.as_str()) != Some("toycodec") {
            return Err(bad("not a toy codec checkpoint".into()));
        }
        let level: CompressionLevel = serde_json::from_value(desc["level"].clone())
            .map_err(|e| bad(format!("level: {e}")))?;
        for (name, shape) in Self::param_shapes() {
            match tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(bad(format!("tensor {name} missing or misshapen"))),
            }
        }
        if tensors.len() != Self::param_shapes().len() {
            return Err(bad("unexpected extra tensors".into()));
        }
        Ok(Self { level, tensors })
    }
}

/// Weight of the spectral L1 term relative to the waveform MSE.
pub const SPECTRAL_WEIGHT: f32 = 0.01;

fn loss_stft() -> StftParams {
    StftParams {
        n_fft: 512,
        hop: 128,
        sample_rate: 44100,
    }
}

/// Mean absolute difference of STFT magnitudes and its gradient with
/// respect to `y`.
pub fn spectral_l1(y: &[f32], x: &[f32]) -> (f32, Vec<f32>) {
    let params = loss_stft();
    let sy = stft_samples(y, &params).expect("segment longer than the loss window");
    let sx = stft_samples(x, &params).expect("segment longer than the loss window");
    let count = sy.data.len() as f32;
    let mut loss = 0f64;
    let mut g = ComplexStft::zeros(params, sy.frames);
    for ((gz, zy), zx) in g.data.iter_mut().zip(&sy.data).zip(&sx.data) {
        let (my, mx) = (magnitude(*zy), magnitude(*zx));
        loss += (my - mx).abs() as f64;
        if my > 0.0 && my != mx {
            *gz = *zy * ((my - mx).signum() / (my * count));
        } else {
            *gz = Complex32::new(0.0, 0.0);
        }
    }
    let dy = stft_adjoint(&g, y.len()).expect("frames fit the segment");
    ((loss / count as f64) as f32, dy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Training segment length in samples (multiple of 16).
    pub segment: usize,
    pub lr: f64,
    pub seed: u64,
    /// Segments in the fixed evaluation set used for the loss trace.
    pub eval_segments: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            steps_per_epoch: 100,
            batch_size: 8,
            segment: 8192,
            lr: 2e-3,
            seed: 0,
            eval_segments: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecTrace {
    /// Loss of the fixed evaluation set before training and after every
    /// epoch (`epochs + 1` values).
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

fn draw_segments(
    corpus: &[AudioClip],
    n: usize,
    seg: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let clip = &corpus[rng.gen_range(0..corpus.len())];
            let ch = rng.gen_range(0..clip.channels());
            let data = clip.channel(ch);
            let mut out = vec![0f32; seg];
            if data.len() <= seg {
                out[..data.len()].copy_from_slice(data);
            } else {
                let off = rng.gen_range(0..=data.len() - seg);
                out.copy_from_slice(&data[off..off + seg]);
            }
            out
        })
        .collect()
}

fn segment_loss(codec: &ToyCodec, x: &[f32], keep_grads: bool) -> (f64, Option<ParamSet>) {
    let (y, tape) = codec.run(x, true, keep_grads);
    let n = x.len() as f32;
    let mse: f64 = y
        .iter()
        .zip(x)
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / n as f64;
    let (l1, dspec) = spectral_l1(&y, x);
    let loss = mse + SPECTRAL_WEIGHT as f64 * l1 as f64;
    let grads = tape.map(|tape| {
        let dy: Vec<f32> = y
            .iter()
            .zip(x)
            .zip(&dspec)
            .map(|((a, b), s)| 2.0 * (a - b) / n + SPECTRAL_WEIGHT * s)
            .collect();
        let mut g = codec.zero_grads();
        codec.backward(tape, dy, &mut g);
        g
    });
    (loss, grads)
}

/// Trains a codec on random segments of `corpus` with Adam. Segment
/// gradients are summed in a fixed order so the result depends only on the
/// seed.
pub fn train_toy_codec(
    corpus: &[AudioClip],
    level: CompressionLevel,
    cfg: &CodecTrainConfig,
) -> Result<(ToyCodec, CodecTrace), ReconError> {
    if corpus.is_empty() || corpus.iter().all(|c| c.is_empty()) {
        return Err(ReconError::EmptyCorpus);
    }
    if cfg.epochs == 0 || cfg.steps_per_epoch == 0 || cfg.batch_size == 0 {
        return Err(ReconError::InvalidConfig(
            "epochs, steps_per_epoch and batch_size must be positive".into(),
        ));
    }
    if cfg.segment < 512 || cfg.segment % TOTAL_STRIDE != 0 {
        return Err(ReconError::InvalidConfig(format!(
            "segment {} must be a multiple of {TOTAL_STRIDE} and at least 512",
            cfg.segment
        )));
    }
    let mut codec = ToyCodec::init(level, cfg.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
    let eval_set = draw_segments(corpus, cfg.eval_segments.max(1), cfg.segment, &mut eval_rng);
    let eval_loss = |codec: &ToyCodec| -> f64 {
        let losses: Vec<f64> = eval_set
            .par_iter()
            .map(|x| segment_loss(codec, x, false).0)
            .collect();
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&codec.tensors);
    let mut trace = CodecTrace {
        epoch_losses: vec![eval_loss(&codec)],
        step_losses: Vec::new(),
    };
    let inv_b = 1.0 / cfg.batch_size as f32;
    for _ in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let batch = draw_segments(corpus, cfg.batch_size, cfg.segment, &mut rng);
            let per: Vec<(f64, ParamSet)> = batch
                .par_iter()
                .map(|x| {
                    let (l, g) = segment_loss(&codec, x, true);
                    (l, g.unwrap())
                })
                .collect();
            let mut grads = codec.zero_grads();
            let mut loss = 0f64;
            for (l, g) in per {
                loss += l;
                for (k, t) in g {
                    grads.get_mut(&k).unwrap().add_assign(&t);
                }
            }
            for t in grads.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= inv_b);
            }
            adam_step(&mut codec.tensors, &grads, &mut state, &adam)?;
            trace.step_losses.push(loss / cfg.batch_size as f64);
        }
        trace.epoch_losses.push(eval_loss(&codec));
    }
    Ok((codec, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantizer_levels() {
        for levels in [16usize, 64, 256] {
            let mut seen: Vec<f64> = (0..2001)
                .map(|i| quantize(-1.2 + 2.4 * i as f64 / 2000.0, levels))
                .collect();
            seen.dedup();
            assert_eq!(seen.len(), levels);
            assert_eq!(seen[0], -1.0);
            assert_eq!(*seen.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn shapes_mirror_and_length_is_preserved() {
        let c: ToyCodec = ToyCodec::init(CompressionLevel::Mid, 0);
        let x: Vec<f32> = (0..256).map(|i| (i as f32 * 0.1).sin()).collect();
        let (y, _) = c.run(&x, true, false);
        assert_eq!(y.len(), 256);
        let y = c.process(&x[..100]);
        assert_eq!(y.len(), 100);
        for i in 0..4 {
            let e = &c.tensors[&format!("enc{i}.weight")];
            let d = &c.tensors[&format!("dec{}.weight", 3 - i)];
            assert_eq!(e.shape()[0], d.shape()[0]);
            assert_eq!(e.shape()[1], d.shape()[1]);
        }
    }

    #[test]
    fn unquantized_path_gradients_match_finite_differences() {
        let c: ToyCodec<f64> = ToyCodec::init(CompressionLevel::High, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let loss = |c: &ToyCodec<f64>| -> f64 {
            let (y, _) = c.run(&x, false, false);
            y.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 64.0
        };
        let (y, tape) = c.run(&x, false, true);
        let dy: Vec<f64> = y
            .iter()
            .zip(&x)
            .map(|(a, b)| 2.0 * (a - b) / 64.0)
            .collect();
        let mut grads = c.zero_grads();
        c.backward(tape.unwrap(), dy, &mut grads);
        let mut probe = c.clone();
        for (name, g) in &grads {
            // sample a handful of coordinates per tensor
            for i in (0..g.len()).step_by((g.len() / 7).max(1)) {
                let orig = c.tensors[name].data()[i];
                let eps = 1e-6;
                probe.tensors.get_mut(name).unwrap().data_mut()[i] = orig + eps;
                let up = loss(&probe);
                probe.tensors.get_mut(name).unwrap().data_mut()[i] = orig - eps;
                let down = loss(&probe);
                probe.tensors.get_mut(name).unwrap().data_mut()[i] = orig;
                let num = (up - down) / (2.0 * eps);
                let a = g.data()[i];
                assert!(
                    (a - num).abs() <= 1e-4 * a.abs().max(num.abs()).max(1e-6),
                    "{name}[{i}]: {a} vs {num}"
                );
            }
        }
    }

    #[test]
    fn spectral_term_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f32> = (0..1024).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let y: Vec<f32> = (0..1024).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let (_, g) = spectral_l1(&y, &x);
        for i in [0usize, 100, 300, 511, 700, 1023] {
            let mut p = y.clone();
            let eps = 1e-3;
            p[i] += eps;
            let up = spectral_l1(&p, &x).0 as f64;
            p[i] -= 2.0 * eps;
            let down = spectral_l1(&p, &x).0 as f64;
            let num = (up - down) / (2.0 * eps as f64);
            assert!(
                (g[i] as f64 - num).abs() < 2e-2 * num.abs().max(1e-4),
                "{i}: {} vs {num}",
                g[i]
            );
        }
    }

    #[test]
    fn short_training_reduces_loss_and_is_deterministic() {
        let x: Vec<f32> = (0..44100)
            .map(|i| 0.3 * (2.0 * std::f32::consts::PI * 220.0 * i as f32 / 44100.0).sin())
            .collect();
        let clip = AudioClip::mono(x, 44100).unwrap();
        let cfg = CodecTrainConfig {
            epochs: 1,
            steps_per_epoch: 15,
            batch_size: 2,
            segment: 2048,
            eval_segments: 4,
            ..Default::default()
        };
        let (a, ta) =
            train_toy_codec(std::slice::from_ref(&clip), CompressionLevel::High, &cfg).unwrap();
        assert!(
            ta.epoch_losses[1] < ta.epoch_losses[0],
            "{:?}",
            ta.epoch_losses
        );
        assert_ne!(
            a.tensors,
            ToyCodec::init(CompressionLevel::High, cfg.seed).tensors
        );
        let (b, tb) = train_toy_codec(&[clip], CompressionLevel::High, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(matches!(
            train_toy_codec(&[], CompressionLevel::High, &cfg),
            Err(ReconError::EmptyCorpus)
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c: ToyCodec = ToyCodec::init(CompressionLevel::Low, 5);
        let p = dir.path().join("codec.ckpt");
        c.save(&p).unwrap();
        assert_eq!(ToyCodec::load(&p).unwrap(), c);
    }
}
