//! The convolutional detector: conv→ReLU→maxpool blocks, global average
//! pooling, two linear layers and a sigmoid output.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{self, ConvGeom};
use super::tensor::{Real, Tensor};
use super::NnError;
use crate::spectral::RepresentationKind;

/// Named parameter tensors, iterated in name order.
pub type ParamSet<T = f32> = BTreeMap<String, Tensor<T>>;

pub const DETECTOR_FILTERS: [usize; 6] = [16, 32, 64, 128, 256, 512];
pub const DETECTOR_HIDDEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub representation: RepresentationKind,
    pub input_channels: usize,
    /// Fixed per-channel multiplier applied to the input before the first
    /// convolution.
    pub input_scale: Vec<f32>,
    pub conv_filters: Vec<usize>,
    pub kernel: [usize; 2],
    pub pool: [usize; 2],
    pub hidden: usize,
}

impl Architecture {
    /// The detector: six 3-wide conv blocks with [16..512] filters, 2-pooling,
    /// global average pool, 512→128→1. The waveform kind runs the same stack
    /// as 1-D convolutions.
    pub fn detector(kind: RepresentationKind) -> Self {
        let (kernel, pool) = if kind.is_spectral() {
            ([3, 3], [2, 2])
        } else {
            ([1, 3], [1, 2])
        };
        Self {
            representation: kind,
            input_channels: kind.input_channels(),
            input_scale: default_input_scale(kind),
            conv_filters: DETECTOR_FILTERS.to_vec(),
            kernel,
            pool,
            hidden: DETECTOR_HIDDEN,
        }
    }

    /// Parameter names and shapes in layer order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.input_channels;
        for (i, &c_out) in self.conv_filters.iter().enumerate() {
            out.push((
                format!("conv{i}.weight"),
                vec![c_out, c_in, self.kernel[0], self.kernel[1]],
            ));
            out.push((format!("conv{i}.bias"), vec![c_out]));
            c_in = c_out;
        }
        out.push(("fc1.weight".into(), vec![self.hidden, c_in]));
        out.push(("fc1.bias".into(), vec![self.hidden]));
        out.push(("fc2.weight".into(), vec![1, self.hidden]));
        out.push(("fc2.bias".into(), vec![1]));
        out
    }

    /// Spatial extent after the conv blocks for an `h × w` input.
    pub fn pooled_extent(&self, h: usize, w: usize) -> (usize, usize) {
        self.conv_filters
            .iter()
            .fold((h, w), |(h, w), _| (h / self.pool[0], w / self.pool[1]))
    }

    pub fn check_input(&self, c: usize, h: usize, w: usize) -> Result<(), NnError> {
        if c != self.input_channels {
            return Err(NnError::Shape(format!(
                "input has {c} channels, model expects {}",
                self.input_channels
            )));
        }
        let (ph, pw) = self.pooled_extent(h, w);
        if ph == 0 || pw == 0 {
            return Err(NnError::Shape(format!(
                "input {h}×{w} collapses to nothing after {} pooling stages",
                self.conv_filters.len()
            )));
        }
        Ok(())
    }
}

fn default_input_scale(kind: RepresentationKind) -> Vec<f32> {
    // dB magnitudes span roughly [-80, 50]; complex parts are raw STFT values.
    match kind {
        RepresentationKind::Waveform => vec![1.0],
        RepresentationKind::Complex => vec![0.1, 0.1],
        RepresentationKind::Amplitude => vec![1.0 / 40.0],
        RepresentationKind::Phase => vec![1.0],
        RepresentationKind::Polar => vec![1.0 / 40.0, 1.0],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub arch: Architecture,
    pub tensors: ParamSet<T>,
}

impl<T: Real> ModelParams<T> {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = ParamSet::new();
        for (name, shape) in arch.param_shapes() {
            let mut t = Tensor::zeros(&shape);
            if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in t.data_mut() {
                    *v = T::lit(rng.gen_range(-bound..bound));
                }
            }
            tensors.insert(name, t);
        }
        Self { arch, tensors }
    }

    pub fn zeros_like(&self) -> ParamSet<T> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.tensors[name]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Checks names and shapes against the architecture descriptor.
    pub fn validate(&self) -> Result<(), NnError> {
        let expected = self.arch.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(NnError::Shape(format!(
                "{} tensors, architecture needs {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(NnError::Shape(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(NnError::Shape(format!("missing tensor {name}"))),
            }
        }
        Ok(())
    }
}

struct BlockTape<T> {
    geom: ConvGeom,
    col: Vec<T>,
    act: Vec<T>,
    pool_idx: Vec<u32>,
}

struct Tape<T> {
    blocks: Vec<BlockTape<T>>,
    pooled_len: usize,
    pooled_plane: usize,
    gap: Vec<T>,
    hidden: Vec<T>,
}

fn forward_item<T: Real>(
    p: &ModelParams<T>,
    x: &[T],
    dims: (usize, usize, usize),
    keep: bool,
) -> (T, Option<Tape<T>>) {
    let arch = &p.arch;
    let (mut c, mut h, mut w) = dims;
    let plane = h * w;
    let mut act: Vec<T> = x.to_vec();
    for (ci, chunk) in act.chunks_mut(plane).enumerate() {
        let s = T::lit(arch.input_scale[ci] as f64);
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    let mut blocks = Vec::new();
    let mut col = Vec::new();
    for (i, &c_out) in arch.conv_filters.iter().enumerate() {
        let geom = ConvGeom::same(c, c_out, h, w, arch.kernel[0], arch.kernel[1]);
        let mut y = layers::conv2d_forward(
            &geom,
            &act,
            p.tensors[&format!("conv{i}.weight")].data(),
            p.tensors[&format!("conv{i}.bias")].data(),
            &mut col,
        );
        layers::relu_inplace(&mut y);
        let (pooled, idx) = layers::maxpool_forward(&y, c_out, h, w, arch.pool[0], arch.pool[1]);
        if keep {
            blocks.push(BlockTape {
                geom,
                col: std::mem::take(&mut col),
                act: y,
                pool_idx: idx,
            });
        }
        act = pooled;
        c = c_out;
        h /= arch.pool[0];
        w /= arch.pool[1];
    }
    let gap = layers::global_avg_pool(&act, c, h * w);
    let mut hidden = layers::linear_forward(
        &gap,
        p.tensors["fc1.weight"].data(),
        p.tensors["fc1.bias"].data(),
    );
    layers::relu_inplace(&mut hidden);
    let logit = layers::linear_forward(
        &hidden,
        p.tensors["fc2.weight"].data(),
        p.tensors["fc2.bias"].data(),
    )[0];
    let tape = keep.then(|| Tape {
        blocks,
        pooled_len: act.len(),
        pooled_plane: h * w,
        gap,
        hidden,
    });
    (logit, tape)
}

fn backward_item<T: Real>(p: &ModelParams<T>, tape: Tape<T>, dlogit: T, grads: &mut ParamSet<T>) {
    let mut take = |name: &str| grads.remove(name).expect("gradient slot");
    let mut put_back = Vec::new();

    let (mut w2, mut b2) = (take("fc2.weight"), take("fc2.bias"));
    let mut dh = layers::linear_backward(
        &tape.hidden,
        p.tensors["fc2.weight"].data(),
        &[dlogit],
        w2.data_mut(),
        b2.data_mut(),
    );
    put_back.push(("fc2.weight", w2));
    put_back.push(("fc2.bias", b2));
    layers::relu_backward_inplace(&tape.hidden, &mut dh);

    let (mut w1, mut b1) = (take("fc1.weight"), take("fc1.bias"));
    let dgap = layers::linear_backward(
        &tape.gap,
        p.tensors["fc1.weight"].data(),
        &dh,
        w1.data_mut(),
        b1.data_mut(),
    );
    put_back.push(("fc1.weight", w1));
    put_back.push(("fc1.bias", b1));

    let mut dact = layers::global_avg_pool_backward(&dgap, tape.pooled_plane);
    debug_assert_eq!(dact.len(), tape.pooled_len);
    let mut conv_grads = Vec::new();
    for (i, block) in tape.blocks.into_iter().enumerate().rev() {
        let mut dy = layers::maxpool_backward(&dact, &block.pool_idx, block.act.len());
        layers::relu_backward_inplace(&block.act, &mut dy);
        let wname = format!("conv{i}.weight");
        let bname = format!("conv{i}.bias");
        let (mut dw, mut db) = (take(&wname), take(&bname));
        let dx = layers::conv2d_backward(
            &block.geom,
            &block.col,
            p.tensors[&wname].data(),
            &dy,
            dw.data_mut(),
            db.data_mut(),
            i > 0,
        );
        conv_grads.push((wname, dw));
        conv_grads.push((bname, db));
        if let Some(dx) = dx {
            dact = dx;
        }
    }
    for (k, v) in put_back {
        grads.insert(k.to_string(), v);
    }
    for (k, v) in conv_grads {
        grads.insert(k, v);
    }
}

fn check_batch<T: Real>(
    p: &ModelParams<T>,
    inputs: &Tensor<T>,
    kind: RepresentationKind,
) -> Result<(usize, (usize, usize, usize)), NnError> {
    if kind != p.arch.representation {
        return Err(NnError::RepresentationMismatch {
            model: p.arch.representation,
            input: kind,
        });
    }
    let s = inputs.shape();
    if s.len() != 4 {
        return Err(NnError::Shape(format!("expected N×C×H×W input, got {s:?}")));
    }
    p.arch.check_input(s[1], s[2], s[3])?;
    Ok((s[0], (s[1], s[2], s[3])))
}

/// Raw logits for every item of an `N×C×H×W` batch.
pub fn model_logits<T: Real>(
    p: &ModelParams<T>,
    inputs: &Tensor<T>,
    kind: RepresentationKind,
) -> Result<Vec<T>, NnError> {
    let (n, dims) = check_batch(p, inputs, kind)?;
    let item = dims.0 * dims.1 * dims.2;
    Ok((0..n)
        .into_par_iter()
        .map(|i| forward_item(p, &inputs.data()[i * item..(i + 1) * item], dims, false).0)
        .collect())
}

/// Per-item probability that the input is synthetic.
pub fn model_forward<T: Real>(
    p: &ModelParams<T>,
    inputs: &Tensor<T>,
    kind: RepresentationKind,
) -> Result<Vec<T>, NnError> {
    Ok(model_logits(p, inputs, kind)?
        .into_iter()
        .map(layers::sigmoid)
        .collect())
}

/// Result of a training pass over one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients<T = f32> {
    /// Mean binary cross-entropy.
    pub loss: T,
    pub probabilities: Vec<T>,
    pub grads: ParamSet<T>,
}

/// Gradients of the mean binary cross-entropy with respect to every
/// parameter. Items are processed independently and reduced in ascending
/// index order.
pub fn model_backward<T: Real>(
    p: &ModelParams<T>,
    inputs: &Tensor<T>,
    kind: RepresentationKind,
    labels: &[T],
) -> Result<BatchGradients<T>, NnError> {
    let (n, dims) = check_batch(p, inputs, kind)?;
    if labels.len() != n {
        return Err(NnError::LabelLength {
            labels: labels.len(),
            batch: n,
        });
    }
    let item = dims.0 * dims.1 * dims.2;
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let per_item: Vec<(T, T, ParamSet<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (logit, tape) =
                forward_item(p, &inputs.data()[i * item..(i + 1) * item], dims, true);
            let prob = layers::sigmoid(logit);
            let loss = layers::bce_with_logit(logit, labels[i]);
            let mut g = p.zeros_like();
            backward_item(
                p,
                tape.expect("tape kept"),
                (prob - labels[i]) * inv_n,
                &mut g,
            );
            (loss, prob, g)
        })
        .collect();
    let mut grads = p.zeros_like();
    let mut loss = T::zero();
    let mut probabilities = Vec::with_capacity(n);
    for (l, prob, g) in per_item {
        loss += l;
        probabilities.push(prob);
        for (k, t) in g {
            grads.get_mut(&k).expect("same names").add_assign(&t);
        }
    }
    Ok(BatchGradients {
        loss: loss * inv_n,
        probabilities,
        grads,
    })
}
