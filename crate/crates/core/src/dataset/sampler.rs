use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::augment::{augment, plain_mono, Preprocess};
use super::manifest::{DatasetManifest, ManifestEntry, Split};
use super::DatasetError;
use crate::audio_io::{read_wav_window, resample, wav_info, AudioClip};
use crate::nn::Tensor;
use crate::spectral::RepresentationKind;

pub const SNIPPET_SECONDS: f64 = 0.8;
/// STFT frames per spectral snippet.
pub const TIME_FRAMES: usize = 128;
/// Source name of the real class.
pub const REAL: &str = "real";

/// Stable 64-bit seed from a list of byte strings.
pub fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub track_id: String,
    /// `"real"` or a decoder id.
    pub source: String,
    pub offset: f64,
}

impl Provenance {
    pub fn label(&self) -> f32 {
        if self.source == REAL {
            0.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnippetBatch {
    pub kind: RepresentationKind,
    /// `[batch, channels, height, width]`.
    pub inputs: Tensor<f32>,
    /// 0 = real, 1 = fake.
    pub labels: Vec<f32>,
    pub provenance: Vec<Provenance>,
}

impl SnippetBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One snippet to extract: where it comes from and how to augment it.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemPlan {
    pub provenance: Provenance,
    pub path: std::path::PathBuf,
    /// Seed of the augmentation draw, `None` for the plain mono mix.
    pub augment_seed: Option<u64>,
}

/// Samples per snippet: enough for exactly [`TIME_FRAMES`] STFT frames for
/// spectral kinds, 0.8 s of audio for the waveform kind.
pub fn snippet_samples(pre: &Preprocess) -> usize {
    if pre.kind.is_spectral() {
        pre.stft.span(TIME_FRAMES)
    } else {
        (SNIPPET_SECONDS * pre.stft.sample_rate as f64).round() as usize
    }
}

pub fn snippet_seconds(pre: &Preprocess) -> f64 {
    snippet_samples(pre) as f64 / pre.stft.sample_rate as f64
}

/// Reads `samples` frames at `target_rate` starting `offset` seconds into the
/// file, resampling when the file rate differs.
pub fn read_excerpt(
    path: &Path,
    offset: f64,
    samples: usize,
    target_rate: u32,
) -> Result<AudioClip, DatasetError> {
    let info = wav_info(path)?;
    if info.sample_rate == target_rate {
        let start = (offset * target_rate as f64).round() as usize;
        return Ok(read_wav_window(path, start, samples)?);
    }
    let ratio = info.sample_rate as f64 / target_rate as f64;
    let start = (offset * info.sample_rate as f64).round() as usize;
    let need =
        ((samples as f64 * ratio).ceil() as usize + 1).min(info.frames - start.min(info.frames));
    let clip = resample(&read_wav_window(path, start, need)?, target_rate)?;
    if clip.len() < samples {
        return Err(DatasetError::Invalid(format!(
            "{}: excerpt at {offset:.3}s shorter than {samples} samples",
            path.display()
        )));
    }
    Ok(clip.slice(0, samples)?)
}

/// Tracks of `split` that carry every requested source and are long enough.
/// Sorted by track id so sampling does not depend on manifest order.
pub fn eligible_tracks<'a>(
    manifest: &'a DatasetManifest,
    split: Split,
    decoders: &[String],
    min_seconds: f64,
) -> Vec<&'a ManifestEntry> {
    let mut out: Vec<&ManifestEntry> = manifest
        .split_entries(split)
        .filter(|e| {
            let complete = decoders.iter().all(|d| e.reconstructions.contains_key(d));
            if !complete {
                log::debug!("{}: missing reconstructions, not sampled", e.track_id);
            }
            let long = e.duration >= min_seconds;
            if !long {
                log::warn!(
                    "{}: {:.2}s is shorter than the {:.2}s needed, skipped",
                    e.track_id,
                    e.duration,
                    min_seconds
                );
            }
            complete && long
        })
        .collect();
    out.sort_by(|a, b| a.track_id.cmp(&b.track_id));
    out
}

fn check_decoders(manifest: &DatasetManifest, decoders: &[String]) -> Result<(), DatasetError> {
    if decoders.is_empty() {
        return Err(DatasetError::Invalid("no decoders in scope".into()));
    }
    let known: BTreeSet<&String> = manifest.decoder_ids.iter().collect();
    for d in decoders {
        if !known.contains(d) {
            return Err(DatasetError::UnknownDecoder(d.clone()));
        }
    }
    Ok(())
}

fn source_path(e: &ManifestEntry, source: &str) -> std::path::PathBuf {
    if source == REAL {
        e.real_path.clone()
    } else {
        e.reconstructions[source].clone()
    }
}

/// Training draws: each item is real with probability ½, otherwise fake
/// from a uniformly chosen decoder; the track and a window start are uniform.
pub fn plan_training_batch(
    manifest: &DatasetManifest,
    split: Split,
    decoders: &[String],
    batch_size: usize,
    seed: u64,
    pre: &Preprocess,
    augment: bool,
) -> Result<Vec<ItemPlan>, DatasetError> {
    check_decoders(manifest, decoders)?;
    let snip = snippet_seconds(pre);
    let tracks = eligible_tracks(manifest, split, decoders, snip);
    if tracks.is_empty() {
        return Err(DatasetError::EmptySplit(split));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..batch_size)
        .map(|_| {
            let fake = rng.gen_bool(0.5);
            let e = tracks[rng.gen_range(0..tracks.len())];
            let source = if fake {
                decoders[rng.gen_range(0..decoders.len())].clone()
            } else {
                REAL.to_string()
            };
            let max_off = (e.duration - snip).max(0.0);
            let offset = rng.gen_range(0.0..=max_off);
            let aug: u64 = rng.gen();
            ItemPlan {
                path: source_path(e, &source),
                provenance: Provenance {
                    track_id: e.track_id.clone(),
                    source,
                    offset,
                },
                augment_seed: augment.then_some(aug),
            }
        })
        .collect())
}

/// Seconds of guard audio kept before and after evaluation snippets so the
/// same positions can feed transforms that need surrounding context.
pub const EVAL_GUARD_BEFORE: f64 = 0.5;
pub const EVAL_EXCERPT: f64 = 2.0;

/// Fixed evaluation snippets: `n_per_source` for the real class and for each
/// decoder. Item `i` of source `s` is drawn from an RNG keyed on
/// `(seed, s, i)`, so the set does not depend on file order.
pub fn plan_eval_set(
    manifest: &DatasetManifest,
    split: Split,
    decoders: &[String],
    n_per_source: usize,
    seed: u64,
) -> Result<Vec<ItemPlan>, DatasetError> {
    check_decoders(manifest, decoders)?;
    let tracks = eligible_tracks(manifest, split, decoders, EVAL_EXCERPT);
    if tracks.is_empty() {
        return Err(DatasetError::EmptySplit(split));
    }
    let mut plans = Vec::new();
    let sources = std::iter::once(REAL.to_string()).chain(decoders.iter().cloned());
    for source in sources {
        for i in 0..n_per_source {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                &seed.to_le_bytes(),
                source.as_bytes(),
                &(i as u64).to_le_bytes(),
            ]));
            let e = tracks[rng.gen_range(0..tracks.len())];
            let hi = e.duration - (EVAL_EXCERPT - EVAL_GUARD_BEFORE);
            let offset = rng.gen_range(EVAL_GUARD_BEFORE..=hi);
            plans.push(ItemPlan {
                path: source_path(e, &source),
                provenance: Provenance {
                    track_id: e.track_id.clone(),
                    source: source.clone(),
                    offset,
                },
                augment_seed: None,
            });
        }
    }
    Ok(plans)
}

/// Mono mix (random or plain) followed by cutoff and representation
/// conversion.
pub fn prepare_clip(
    clip: &AudioClip,
    augment_seed: Option<u64>,
    pre: &Preprocess,
) -> Result<Vec<f32>, DatasetError> {
    let mono = match augment_seed {
        Some(s) => augment(clip, &mut ChaCha8Rng::seed_from_u64(s))?,
        None => plain_mono(clip)?,
    };
    Ok(pre.apply(&mono)?.data)
}

/// Stacks per-item inputs into a batch tensor.
pub fn assemble(
    pre: &Preprocess,
    items: Vec<Vec<f32>>,
    provenance: Vec<Provenance>,
) -> SnippetBatch {
    let [c, h, w] = pre.item_shape(snippet_samples(pre));
    let n = items.len();
    let mut data = Vec::with_capacity(n * c * h * w);
    for it in items {
        debug_assert_eq!(it.len(), c * h * w);
        data.extend(it);
    }
    SnippetBatch {
        kind: pre.kind,
        inputs: Tensor::from_vec(&[n, c, h, w], data).expect("item sizes agree"),
        labels: provenance.iter().map(Provenance::label).collect(),
        provenance,
    }
}

/// Reads and preprocesses planned items in parallel, keeping plan order.
pub fn render(plans: &[ItemPlan], pre: &Preprocess) -> Result<SnippetBatch, DatasetError> {
    let samples = snippet_samples(pre);
    let items: Vec<Vec<f32>> = plans
        .par_iter()
        .map(|p| {
            let clip = read_excerpt(&p.path, p.provenance.offset, samples, pre.stft.sample_rate)?;
            prepare_clip(&clip, p.augment_seed, pre)
        })
        .collect::<Result<_, _>>()?;
    Ok(assemble(
        pre,
        items,
        plans.iter().map(|p| p.provenance.clone()).collect(),
    ))
}

/// A seeded training batch over `decoders`.
pub fn sample_batch(
    manifest: &DatasetManifest,
    split: Split,
    decoders: &[String],
    batch_size: usize,
    seed: u64,
    pre: &Preprocess,
    augment: bool,
) -> Result<SnippetBatch, DatasetError> {
    let plans = plan_training_batch(manifest, split, decoders, batch_size, seed, pre, augment)?;
    render(&plans, pre)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::StftParams;

    #[test]
    fn snippet_lengths() {
        let amp = Preprocess::new(RepresentationKind::Amplitude, StftParams::default());
        assert_eq!(snippet_samples(&amp), 127 * 276 + 2048);
        assert_eq!(StftParams::default().frames_for(snippet_samples(&amp)), 128);
        let wave = Preprocess::new(RepresentationKind::Waveform, StftParams::default());
        assert_eq!(snippet_samples(&wave), 35280);
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(&[b"x", b"y"]);
        assert_eq!(a, derive_seed(&[b"x", b"y"]));
        assert_ne!(a, derive_seed(&[b"xy"]));
        assert_ne!(a, derive_seed(&[b"x", b"z"]));
    }
}
