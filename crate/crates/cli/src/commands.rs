//! Subcommand implementations.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use aimd_core::audio_io::{read_wav, wav_info, write_wav};
use aimd_core::dataset::{build_manifest, DatasetManifest, Split};
use aimd_core::eval::{detect, matrix_row, EvalConfig, GeneralisationMatrix, MatrixRow};
use aimd_core::nn::ModelParams;
use aimd_core::reconstruction::{
    batch_reconstruct, train_toy_codec, BatchReport, CompressionLevel, Decoder, DecoderSpec,
};
use aimd_core::robustness::{robustness_report, ReencodeCodec, TransformKind, TransformSpec};
use aimd_core::training::{train, TrainError};
use anyhow::{Context, Result};

use crate::config::{ConfigError, RunConfig};
use crate::run::RunDir;
use crate::{Cli, Command};

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Train(a) => {
            if let Some(r) = &a.representation {
                cfg.train.representation = r.parse().map_err(config_error)?;
            }
            if !a.decoders.is_empty() {
                cfg.train.decoder_ids.clone_from(&a.decoders);
            }
            if let Some(e) = a.epochs {
                cfg.train.max_epochs = e;
            }
            if let Some(s) = a.steps {
                cfg.train.steps_per_epoch = s;
            }
        }
        Command::Eval(a) | Command::Robustness(a) => {
            if let Some(s) = &a.split {
                cfg.eval.split = s.parse().map_err(config_error)?;
            }
            if let Some(n) = a.snippets {
                cfg.eval.n_snippets = n;
            }
        }
        Command::Genmatrix(a) => {
            if let Some(e) = a.epochs {
                cfg.train.max_epochs = e;
            }
            if let Some(s) = a.steps {
                cfg.train.steps_per_epoch = s;
            }
            if let Some(n) = a.snippets {
                cfg.eval.n_snippets = n;
            }
        }
        Command::Detect(a) => {
            if let Some(s) = a.stride {
                cfg.detect.stride_seconds = s;
            }
        }
        _ => {}
    }
    cfg.finalize();
    cfg.validate()?;
    match &cli.command {
        Command::BuildDataset(a) => build_dataset(&cfg, a.resume.as_deref()),
        Command::TrainCodec(a) => train_codec(&cfg, &a.level),
        Command::Reconstruct(a) => reconstruct(&cfg, a),
        Command::Train(a) => train_detector(&cfg, &a.manifest),
        Command::Eval(a) => eval(&cfg, &a.manifest, &a.checkpoint),
        Command::Robustness(a) => robustness(&cfg, &a.manifest, &a.checkpoint),
        Command::Genmatrix(a) => genmatrix(&cfg, &a.manifest, &a.decoders, cli.jobs),
        Command::Detect(a) => detect_file(&cfg, &a.checkpoint, &a.audio),
    }
}

fn eval_config(cfg: &RunConfig) -> EvalConfig {
    EvalConfig {
        split: cfg.eval.split,
        seed: cfg.seed,
        n_snippets: cfg.eval.n_snippets,
        decoders: Vec::new(),
        stft: cfg.stft,
    }
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelParams> {
    ModelParams::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn report_batch(run: &RunDir, report: &BatchReport) -> Result<()> {
    report.manifest.save(&run.file("manifest.jsonl"))?;
    let mut failures = String::from("track_id,decoder_id,error\n");
    for f in &report.failures {
        failures.push_str(&format!(
            "{},{},{}\n",
            f.track_id,
            f.decoder_id.as_deref().unwrap_or(""),
            f.error.replace([',', '\n'], ";")
        ));
    }
    run.write("failures.csv", &failures)?;
    if !report.failures.is_empty() {
        log::warn!(
            "{} reconstructions failed; see {}",
            report.failures.len(),
            run.file("failures.csv").display()
        );
    }
    println!(
        "{} written, {} kept, {} failed; manifest {}",
        report.written,
        report.skipped,
        report.failures.len(),
        run.file("manifest.jsonl").display()
    );
    Ok(())
}

fn build_dataset(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let corpus = cfg.corpus_dir()?;
    if cfg.decoders.is_empty() {
        return Err(config_error("no decoders configured"));
    }
    let run = match resume {
        Some(p) => RunDir::resume(cfg, "build-dataset", p)?,
        None => RunDir::create(cfg, "build-dataset")?,
    };
    let base = build_manifest(corpus, cfg.seed)?;
    let [tr, va, te] = base.split_counts();
    log::info!(
        "{} tracks: {tr} train, {va} valid, {te} test",
        base.entries.len()
    );
    let report = batch_reconstruct(&base, &cfg.decoders, &run.file("recon"))?;
    report_batch(&run, &report)
}

fn train_codec(cfg: &RunConfig, levels: &[String]) -> Result<()> {
    let levels: Vec<CompressionLevel> = if levels.is_empty() {
        CompressionLevel::ALL.to_vec()
    } else {
        levels
            .iter()
            .map(|l| l.parse().map_err(config_error))
            .collect::<Result<_>>()?
    };
    let base = build_manifest(cfg.corpus_dir()?, cfg.seed)?;
    let run = RunDir::create(cfg, "train-codec")?;
    let clips = base
        .split_entries(Split::Train)
        .map(|e| {
            read_wav(&e.real_path).with_context(|| format!("reading {}", e.real_path.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    for level in levels {
        let (codec, trace) = train_toy_codec(&clips, level, &cfg.codec)?;
        let ckpt = run.file(&format!("toycodec-{level}.ckpt"));
        codec.save(&ckpt)?;
        let mut csv = String::from("epoch,eval_loss\n");
        for (i, l) in trace.epoch_losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l:.6}\n"));
        }
        run.write(&format!("toycodec-{level}_trace.csv"), &csv)?;
        println!("{level}: {}", ckpt.display());
    }
    Ok(())
}

fn selected_decoders(cfg: &RunConfig, ids: &[String]) -> Result<Vec<DecoderSpec>> {
    if ids.is_empty() {
        return Ok(cfg.decoders.clone());
    }
    ids.iter()
        .map(|id| {
            cfg.decoders
                .iter()
                .find(|d| &d.id == id)
                .cloned()
                .ok_or_else(|| config_error(format!("decoder {id} is not configured")))
        })
        .collect()
}

fn reconstruct(cfg: &RunConfig, a: &crate::ReconstructArgs) -> Result<()> {
    let specs = selected_decoders(cfg, &a.decoder)?;
    if specs.is_empty() {
        return Err(config_error("no decoders configured"));
    }
    if let Some(audio) = &a.audio {
        let run = RunDir::create(cfg, "reconstruct")?;
        let clip = read_wav(audio)?;
        let encoding = wav_info(audio)?.encoding;
        let stem = audio
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "audio".into());
        for spec in &specs {
            let y = Decoder::resolve(spec)?.reconstruct(&clip, Some(&stem))?;
            let out = run.file(&format!("{stem}.{}.wav", spec.id));
            write_wav(&y, &out, encoding)?;
            println!("{}", out.display());
        }
        return Ok(());
    }
    let manifest = load_manifest(
        a.manifest
            .as_deref()
            .ok_or_else(|| config_error("reconstruct needs --manifest or --audio"))?,
    )?;
    let run = match &a.resume {
        Some(p) => RunDir::resume(cfg, "reconstruct", p)?,
        None => RunDir::create(cfg, "reconstruct")?,
    };
    let report = batch_reconstruct(&manifest, &specs, &run.file("recon"))?;
    report_batch(&run, &report)
}

fn train_detector(cfg: &RunConfig, manifest: &Path) -> Result<()> {
    let manifest = load_manifest(manifest)?;
    let run = RunDir::create(cfg, "train")?;
    match train(&manifest, &cfg.train) {
        Ok(out) => {
            out.best.save(&run.file("model.ckpt"))?;
            out.log.write_csv(&run.file("train_log.csv"))?;
            let best = out.log.best().map_or(0.0, |e| e.valid_acc);
            println!(
                "best epoch {} (valid acc {:.4}); checkpoint {}",
                out.best_epoch,
                best,
                run.file("model.ckpt").display()
            );
            Ok(())
        }
        Err(TrainError::Diverged {
            epoch,
            step,
            reason,
            last_good,
        }) => {
            let p = run.file("last_good.ckpt");
            last_good.save(&p)?;
            Err(TrainError::Diverged {
                epoch,
                step,
                reason: format!("{reason} (last good parameters in {})", p.display()),
                last_good,
            }
            .into())
        }
        Err(e) => Err(e.into()),
    }
}

fn eval(cfg: &RunConfig, manifest: &Path, checkpoint: &Path) -> Result<()> {
    let manifest = load_manifest(manifest)?;
    let model = load_model(checkpoint)?;
    let run = RunDir::create(cfg, "eval")?;
    let report = aimd_core::eval::evaluate(&model, &manifest, &eval_config(cfg))?;
    run.write("report.csv", &report.to_csv())?;
    run.write("report.md", &report.to_markdown())?;
    run.write("predictions.csv", &report.predictions_csv())?;
    print!("{}", report.to_markdown());
    Ok(())
}

/// Manipulation suite used when the config lists no transforms.
fn default_transforms(cfg: &RunConfig) -> Vec<TransformSpec> {
    let command = cfg.encoder_command.clone();
    let mut kinds = vec![
        TransformKind::PitchShift {
            semitones: Some(2.0),
        },
        TransformKind::PitchShift {
            semitones: Some(-2.0),
        },
        TransformKind::TimeStretch { ratio: None },
        TransformKind::Eq { gains_db: None },
        TransformKind::Reverb {
            decay: 1.0,
            wet: 0.3,
        },
        TransformKind::WhiteNoise {
            snr_db: aimd_core::robustness::DEFAULT_NOISE_SNR_DB,
        },
    ];
    for codec in [ReencodeCodec::Mp3, ReencodeCodec::Aac, ReencodeCodec::Opus] {
        kinds.push(TransformKind::Reencode {
            codec,
            command: command.clone(),
        });
    }
    kinds
        .into_iter()
        .map(|k| TransformSpec::new(k, cfg.seed))
        .collect()
}

fn robustness(cfg: &RunConfig, manifest: &Path, checkpoint: &Path) -> Result<()> {
    let manifest = load_manifest(manifest)?;
    let model = load_model(checkpoint)?;
    let transforms = if cfg.transforms.is_empty() {
        default_transforms(cfg)
    } else {
        cfg.transforms.clone()
    };
    let run = RunDir::create(cfg, "robustness")?;
    let report = robustness_report(&model, &manifest, &transforms, &eval_config(cfg))?;
    run.write("robustness.csv", &report.to_csv())?;
    run.write("robustness.md", &report.to_markdown())?;
    print!("{}", report.to_markdown());
    let skipped = report.rows.iter().filter(|r| r.result.is_err()).count();
    if skipped > 0 {
        log::warn!("{skipped} transform rows skipped");
    }
    Ok(())
}

fn genmatrix(cfg: &RunConfig, manifest: &Path, decoders: &[String], jobs: usize) -> Result<()> {
    let manifest = load_manifest(manifest)?;
    let decoders = if decoders.is_empty() {
        manifest.decoder_ids.clone()
    } else {
        decoders.to_vec()
    };
    if decoders.len() < 2 {
        return Err(config_error("the matrix needs at least two decoders"));
    }
    let run = RunDir::create(cfg, "genmatrix")?;
    let eval = eval_config(cfg);
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<MatrixRow>>> = Mutex::new(vec![None; decoders.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, decoders.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= decoders.len() {
                    break;
                }
                log::info!("matrix row {}", decoders[i]);
                let row = matrix_row(&manifest, &cfg.train, &decoders, &decoders[i], &eval);
                rows.lock().expect("no worker panicked")[i] = Some(row);
            });
        }
    });
    let matrix = GeneralisationMatrix {
        rows: rows
            .into_inner()
            .expect("no worker panicked")
            .into_iter()
            .map(|r| r.expect("every row ran"))
            .collect(),
        decoders,
    };
    run.write("matrix.tsv", &matrix.to_tsv())?;
    run.write("matrix.csv", &matrix.to_csv())?;
    run.write("matrix.md", &matrix.to_markdown())?;
    print!("{}", matrix.to_markdown());
    let failed: Vec<&str> = matrix
        .rows
        .iter()
        .filter(|r| r.result.is_err())
        .map(|r| r.train_decoder.as_str())
        .collect();
    if !failed.is_empty() {
        log::warn!("matrix rows failed: {}", failed.join(", "));
    }
    Ok(())
}

fn detect_file(cfg: &RunConfig, checkpoint: &Path, audio: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let run = RunDir::create(cfg, "detect")?;
    let report = detect(&model, audio, cfg.detect.stride_seconds, &cfg.stft)?;
    run.write("windows.csv", &report.to_csv())?;
    let flagged = report.windows.iter().filter(|(_, p)| *p > 0.5).count();
    println!(
        "{}: {flagged} of {} windows flagged as synthetic (fraction {:.3})",
        audio.display(),
        report.windows.len(),
        report.flagged_fraction
    );
    Ok(())
}
