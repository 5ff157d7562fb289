//! The desk dataset shared by the acceptance criteria: synthetic tracks,
//! their splits, three trained toy codecs and five decoder reconstructions.
//! Every stage skips work whose outputs already exist.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use aimd_core::audio_io::read_wav;
use aimd_core::dataset::{build_manifest, DatasetManifest, Split};
use aimd_core::reconstruction::{
    batch_reconstruct, train_toy_codec, CodecTrainConfig, CompressionLevel, DecoderSpec,
};

use super::corpus::write_corpus;

pub const TRACKS: usize = 100;
pub const SECONDS: f64 = 30.0;
pub const CORPUS_SEED: u64 = 7;
pub const SPLIT_SEED: u64 = 11;
/// Training tracks used to fit the codecs.
pub const CODEC_TRACKS: usize = 20;

pub const DECODERS: [&str; 5] = [
    "griffinmel-256",
    "griffinmel-512",
    "toycodec-low",
    "toycodec-mid",
    "toycodec-high",
];

pub struct Fixture {
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    pub specs: Vec<DecoderSpec>,
    /// Wall-clock time spent fitting the toy codecs in this call.
    pub codec_training: Duration,
    /// Wall-clock time of splitting and reconstructing in this call.
    pub dataset_build: Duration,
}

pub fn family(decoder: &str) -> &str {
    decoder.split('-').next().unwrap()
}

pub fn build(root: &Path) -> Fixture {
    let real_dir = root.join("real");
    write_corpus(&real_dir, TRACKS, SECONDS, CORPUS_SEED);
    let started = Instant::now();
    let base = build_manifest(&real_dir, SPLIT_SEED).unwrap();
    let mut dataset_build = started.elapsed();
    let mut codec_training = Duration::ZERO;

    let ckpt_dir = root.join("codecs");
    std::fs::create_dir_all(&ckpt_dir).unwrap();
    let mut specs = vec![DecoderSpec::griffinmel(256), DecoderSpec::griffinmel(512)];
    let mut train_clips = None;
    for level in CompressionLevel::ALL {
        let path = ckpt_dir.join(format!("toycodec-{level}.ckpt"));
        if !path.exists() {
            let clips = train_clips.get_or_insert_with(|| {
                base.split_entries(Split::Train)
                    .take(CODEC_TRACKS)
                    .map(|e| read_wav(&e.real_path).unwrap())
                    .collect::<Vec<_>>()
            });
            let cfg = CodecTrainConfig {
                seed: 5,
                ..Default::default()
            };
            let started = Instant::now();
            let (codec, _) = train_toy_codec(clips, level, &cfg).unwrap();
            codec.save(&path).unwrap();
            codec_training += started.elapsed();
        }
        specs.push(DecoderSpec::toycodec(path, level));
    }
    drop(train_clips);
    let ids: Vec<&str> = specs.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, DECODERS);

    let started = Instant::now();
    let report = batch_reconstruct(&base, &specs, &root.join("recon")).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    let manifest_path = root.join("manifest.jsonl");
    report.manifest.save(&manifest_path).unwrap();
    dataset_build += started.elapsed();
    let manifest = DatasetManifest::load(&manifest_path).unwrap();
    Fixture {
        root: root.to_path_buf(),
        manifest_path,
        manifest,
        specs,
        codec_training,
        dataset_build,
    }
}
