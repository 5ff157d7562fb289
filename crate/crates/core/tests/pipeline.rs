//! End-to-end run over a tiny synthetic corpus: manifest, reconstruction,
//! training, checkpointing, evaluation, robustness and window detection.

use std::path::Path;

use aimd_core::audio_io::{read_wav, wav_info, write_wav, AudioClip, WavEncoding};
use aimd_core::dataset::{build_manifest, DatasetManifest, Split, REAL};
use aimd_core::eval::{detect, evaluate, EvalConfig};
use aimd_core::nn::ModelParams;
use aimd_core::reconstruction::{batch_reconstruct, DecoderConfig, DecoderSpec};
use aimd_core::robustness::{robustness_report, TransformKind, TransformSpec};
use aimd_core::spectral::{RepresentationKind, StftParams};
use aimd_core::training::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: u32 = 44100;

fn write_tracks(dir: &Path, count: usize, seconds: f64) {
    std::fs::create_dir_all(dir).unwrap();
    let n = (seconds * SR as f64) as usize;
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let partials: Vec<(f64, f64)> = (0..4)
            .map(|_| (rng.gen_range(110.0..1760.0), rng.gen_range(0.05..0.2)))
            .collect();
        let left: Vec<f32> = (0..n)
            .map(|k| {
                let t = k as f64 / SR as f64;
                let tone: f64 = partials
                    .iter()
                    .map(|(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin())
                    .sum();
                (tone + rng.gen_range(-0.01..0.01)) as f32
            })
            .collect();
        let right: Vec<f32> = left.iter().map(|v| v * 0.8).collect();
        let clip = AudioClip::new(vec![left, right], SR).unwrap();
        write_wav(&clip, &dir.join(format!("t{i:02}.wav")), WavEncoding::Pcm16).unwrap();
    }
}

fn quick_griffinmel() -> DecoderSpec {
    DecoderSpec {
        id: "griffinmel-128".into(),
        config: DecoderConfig::Griffinmel {
            n_mels: 128,
            gl_iters: 4,
        },
    }
}

fn dataset(root: &Path) -> DatasetManifest {
    write_tracks(&root.join("real"), 12, 3.0);
    let base = build_manifest(&root.join("real"), 1).unwrap();
    let report = batch_reconstruct(&base, &[quick_griffinmel()], &root.join("recon")).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert_eq!(report.written, 12);
    report.manifest
}

#[test]
fn manifest_splits_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_tracks(&dir.path().join("real"), 20, 1.0);
    let m = build_manifest(&dir.path().join("real"), 9).unwrap();
    assert_eq!(m.split_counts(), [14, 2, 4]);
    let again = build_manifest(&dir.path().join("real"), 9).unwrap();
    assert_eq!(m, again);

    let nested = dir.path().join("elsewhere/manifest.jsonl");
    std::fs::create_dir_all(nested.parent().unwrap()).unwrap();
    m.save(&nested).unwrap();
    let loaded = DatasetManifest::load(&nested).unwrap();
    assert_eq!(loaded.entries.len(), 20);
    for (a, b) in m.entries.iter().zip(&loaded.entries) {
        assert_eq!(a.track_id, b.track_id);
        assert_eq!(a.split, b.split);
        assert_eq!(
            a.real_path.canonicalize().unwrap(),
            b.real_path.canonicalize().unwrap()
        );
    }
}

#[test]
fn too_few_tracks_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_tracks(dir.path(), 3, 1.0);
    assert!(build_manifest(dir.path(), 0).is_err());
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());

    for e in &manifest.entries {
        let real = wav_info(&e.real_path).unwrap();
        let recon = wav_info(&e.reconstructions["griffinmel-128"]).unwrap();
        assert_eq!(recon.sample_rate, real.sample_rate);
        assert_eq!(recon.frames, real.frames);
        assert_eq!(recon.channels, real.channels);
    }

    // rerunning reuses existing reconstructions
    let again =
        batch_reconstruct(&manifest, &[quick_griffinmel()], &dir.path().join("recon")).unwrap();
    assert_eq!(again.written, 0);
    assert_eq!(again.skipped, 12);

    let cfg = TrainConfig {
        representation: RepresentationKind::Amplitude,
        batch_size: 4,
        steps_per_epoch: 3,
        max_epochs: 2,
        patience: 1,
        valid_snippets: 4,
        seed: 3,
        ..Default::default()
    };
    let out = train(&manifest, &cfg).unwrap();
    assert!(!out.log.epochs.is_empty());
    assert!(out.log.to_csv().starts_with("epoch,"));

    let ckpt = dir.path().join("model.ckpt");
    out.best.save(&ckpt).unwrap();
    let model = ModelParams::load(&ckpt).unwrap();
    assert_eq!(model, out.best);

    let eval = EvalConfig {
        split: Split::Test,
        seed: 8,
        n_snippets: 5,
        decoders: Vec::new(),
        stft: StftParams::default(),
    };
    let report = evaluate(&model, &manifest, &eval).unwrap();
    assert_eq!(report, evaluate(&model, &manifest, &eval).unwrap());
    assert_eq!(report.per_class.len(), 2);
    assert!(report.per_class.iter().all(|c| c.total == 5));
    assert_eq!(report.predictions.len(), 10);
    let correct: usize = report.per_class.iter().map(|c| c.correct).sum();
    assert!((report.overall_accuracy - correct as f64 / 10.0).abs() < 1e-12);
    assert!(report.recall(REAL).is_some());

    let transforms = [
        TransformSpec::new(TransformKind::Identity, 0),
        TransformSpec::new(TransformKind::WhiteNoise { snr_db: 10.0 }, 0),
    ];
    let rob = robustness_report(&model, &manifest, &transforms, &eval).unwrap();
    assert_eq!(rob.rows.len(), 3);
    assert_eq!(rob.baseline(), &report);
    let identity = rob.row(&transforms[0].to_string()).unwrap();
    assert_eq!(identity.result.as_ref().unwrap(), &report);
    let csv = rob.to_csv();
    assert_eq!(csv.lines().count(), 4);

    let track = &manifest.entries[0].real_path;
    let windows = detect(&model, track, 0.6, &StftParams::default()).unwrap();
    let len = read_wav(track).unwrap().duration();
    assert_eq!(windows.windows.len(), (len / 0.6).floor() as usize);
    assert!(windows.windows.iter().all(|(_, p)| (0.0..=1.0).contains(p)));
}
