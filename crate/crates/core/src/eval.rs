//! Accuracy evaluation with per-class breakdowns, the decoder
//! generalisation matrix, and sliding-window scoring of single files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{read_wav, resample, AudioError};
use crate::dataset::{
    derive_seed, plain_mono, plan_eval_set, snippet_samples, DatasetError, DatasetManifest,
    Preprocess, Provenance, Split, REAL,
};
use crate::nn::{model_forward, ModelParams, NnError, Tensor};
use crate::spectral::StftParams;
use crate::training::{predict_plans, train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {seconds:.3}s of audio is shorter than one {needed:.3}s window")]
    TooShort {
        path: std::path::PathBuf,
        seconds: f64,
        needed: f64,
    },
    #[error("invalid evaluation request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Correct/total counts of one class source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub class: String,
    pub correct: usize,
    pub total: usize,
}

impl ClassStat {
    pub fn recall(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub track_id: String,
    pub source: String,
    pub offset: f64,
    pub probability: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    /// Real class first, then decoders in manifest order.
    pub per_class: Vec<ClassStat>,
    /// Snippets per class source.
    pub n_snippets: usize,
    pub seed: u64,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn recall(&self, class: &str) -> Option<f64> {
        self.per_class
            .iter()
            .find(|c| c.class == class)
            .map(ClassStat::recall)
    }

    /// Recomputes the label-weighted accuracy from the class counts.
    pub fn accuracy_from_counts(&self) -> f64 {
        let (c, t) = self
            .per_class
            .iter()
            .fold((0, 0), |(c, t), s| (c + s.correct, t + s.total));
        if t == 0 {
            0.0
        } else {
            c as f64 / t as f64
        }
    }

    pub fn fake_recall(&self) -> f64 {
        let (c, t) = self
            .per_class
            .iter()
            .filter(|s| s.class != REAL)
            .fold((0, 0), |(c, t), s| (c + s.correct, t + s.total));
        if t == 0 {
            0.0
        } else {
            c as f64 / t as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,correct,total,recall\n");
        for c in &self.per_class {
            s.push_str(&format!(
                "{},{},{},{:.6}\n",
                c.class,
                c.correct,
                c.total,
                c.recall()
            ));
        }
        let total: usize = self.per_class.iter().map(|c| c.total).sum();
        let correct: usize = self.per_class.iter().map(|c| c.correct).sum();
        s.push_str(&format!(
            "overall,{correct},{total},{:.6}\n",
            self.overall_accuracy
        ));
        s
    }

    pub fn to_markdown(&self) -> String {
        let width = self
            .per_class
            .iter()
            .map(|c| c.class.len())
            .max()
            .unwrap_or(5)
            .max("overall".len());
        let mut s = format!(
            "| {:<width$} | recall |\n|{}|--------|\n",
            "class",
            "-".repeat(width + 2)
        );
        for c in &self.per_class {
            s.push_str(&format!(
                "| {:<width$} | {:>6.1} |\n",
                c.class,
                100.0 * c.recall()
            ));
        }
        s.push_str(&format!(
            "| {:<width$} | {:>6.1} |\n",
            "overall",
            100.0 * self.overall_accuracy
        ));
        s
    }

    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("track_id,source,offset,probability\n");
        for p in &self.predictions {
            s.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                p.track_id, p.source, p.offset, p.probability
            ));
        }
        s
    }
}

/// Builds a report from scored snippets. Classes appear in `sources` order.
pub fn report_from(
    sources: &[String],
    provenance: &[Provenance],
    probs: &[f32],
    n_snippets: usize,
    seed: u64,
) -> EvalReport {
    let mut stats: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (p, &q) in provenance.iter().zip(probs) {
        let e = stats.entry(p.source.as_str()).or_default();
        e.1 += 1;
        if (q > 0.5) == (p.label() > 0.5) {
            e.0 += 1;
        }
    }
    let per_class: Vec<ClassStat> = sources
        .iter()
        .map(|s| {
            let (correct, total) = stats.get(s.as_str()).copied().unwrap_or((0, 0));
            ClassStat {
                class: s.clone(),
                correct,
                total,
            }
        })
        .collect();
    let mut report = EvalReport {
        overall_accuracy: 0.0,
        per_class,
        n_snippets,
        seed,
        predictions: provenance
            .iter()
            .zip(probs)
            .map(|(p, &q)| Prediction {
                track_id: p.track_id.clone(),
                source: p.source.clone(),
                offset: p.offset,
                probability: q,
            })
            .collect(),
    };
    report.overall_accuracy = report.accuracy_from_counts();
    report
}

/// What to evaluate on.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub split: Split,
    pub seed: u64,
    /// Snippets per class source.
    pub n_snippets: usize,
    /// Decoders forming the fake classes; empty means all of the manifest's.
    pub decoders: Vec<String>,
    pub stft: StftParams,
}

impl EvalConfig {
    pub fn resolved_decoders(&self, manifest: &DatasetManifest) -> Vec<String> {
        if self.decoders.is_empty() {
            manifest.decoder_ids.clone()
        } else {
            self.decoders.clone()
        }
    }
}

/// Accuracy over seeded snippets of every class source, thresholding the
/// sigmoid output at 0.5 (`p > 0.5` means fake).
pub fn evaluate(
    model: &ModelParams,
    manifest: &DatasetManifest,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let decoders = cfg.resolved_decoders(manifest);
    let plans = plan_eval_set(manifest, cfg.split, &decoders, cfg.n_snippets, cfg.seed)?;
    let pre = Preprocess::new(model.arch.representation, cfg.stft);
    let probs = predict_plans(model, &plans, &pre)?;
    let provenance: Vec<Provenance> = plans.into_iter().map(|p| p.provenance).collect();
    let sources: Vec<String> = std::iter::once(REAL.to_string()).chain(decoders).collect();
    Ok(report_from(
        &sources,
        &provenance,
        &probs,
        cfg.n_snippets,
        cfg.seed,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub train_decoder: String,
    /// `Err` holds the failure message of a row whose training failed.
    pub result: Result<RowResult, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowResult {
    pub report: EvalReport,
    pub best_epoch: usize,
    pub best_valid_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralisationMatrix {
    pub decoders: Vec<String>,
    pub rows: Vec<MatrixRow>,
}

impl GeneralisationMatrix {
    /// Fake recall for `(train, test)`, `None` for a failed row.
    pub fn fake_recall(&self, train: usize, test: usize) -> Option<f64> {
        self.rows[train]
            .result
            .as_ref()
            .ok()
            .and_then(|r| r.report.recall(&self.decoders[test]))
    }

    pub fn real_recall(&self, train: usize) -> Option<f64> {
        self.rows[train]
            .result
            .as_ref()
            .ok()
            .and_then(|r| r.report.recall(REAL))
    }

    /// Accuracy over the real snippets plus the fakes of one test decoder.
    pub fn cell_accuracy(&self, train: usize, test: usize) -> Option<f64> {
        let r = self.rows[train].result.as_ref().ok()?;
        let real = r.report.per_class.iter().find(|c| c.class == REAL)?;
        let fake = r
            .report
            .per_class
            .iter()
            .find(|c| c.class == self.decoders[test])?;
        Some((real.correct + fake.correct) as f64 / (real.total + fake.total) as f64)
    }

    /// Heat-map-ready fake recall, rows = training decoder.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("train\\test\t{}\n", self.decoders.join("\t"));
        for (i, row) in self.rows.iter().enumerate() {
            let cells: Vec<String> = (0..self.decoders.len())
                .map(|j| {
                    self.fake_recall(i, j)
                        .map_or_else(|| "failed".to_string(), |v| format!("{v:.6}"))
                })
                .collect();
            s.push_str(&format!("{}\t{}\n", row.train_decoder, cells.join("\t")));
        }
        s
    }

    /// Long format with every metric per cell.
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("train_decoder,test_decoder,fake_recall,real_recall,accuracy,status\n");
        for (i, row) in self.rows.iter().enumerate() {
            for (j, col) in self.decoders.iter().enumerate() {
                match &row.result {
                    Ok(_) => s.push_str(&format!(
                        "{},{},{:.6},{:.6},{:.6},ok\n",
                        row.train_decoder,
                        col,
                        self.fake_recall(i, j).unwrap_or(0.0),
                        self.real_recall(i).unwrap_or(0.0),
                        self.cell_accuracy(i, j).unwrap_or(0.0)
                    )),
                    Err(e) => s.push_str(&format!(
                        "{},{},,,,failed: {}\n",
                        row.train_decoder,
                        col,
                        e.replace([',', '\n'], ";")
                    )),
                }
            }
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let w = self
            .decoders
            .iter()
            .map(|d| d.len())
            .max()
            .unwrap_or(4)
            .max(10);
        let mut s = format!("| {:<w$} |", "train\\test");
        for d in &self.decoders {
            s.push_str(&format!(" {d:>w$} |"));
        }
        s.push_str(&format!(" {:>w$} |\n|{}|", "real", "-".repeat(w + 2)));
        for _ in 0..=self.decoders.len() {
            s.push_str(&format!("{}:|", "-".repeat(w + 1)));
        }
        s.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            s.push_str(&format!("| {:<w$} |", row.train_decoder));
            for j in 0..self.decoders.len() {
                let cell = self
                    .fake_recall(i, j)
                    .map_or("failed".to_string(), |v| format!("{:.1}", 100.0 * v));
                s.push_str(&format!(" {cell:>w$} |"));
            }
            let real = self
                .real_recall(i)
                .map_or("failed".to_string(), |v| format!("{:.1}", 100.0 * v));
            s.push_str(&format!(" {real:>w$} |\n"));
        }
        s
    }
}

/// One matrix row: train on `train_decoder` alone, then evaluate real recall
/// and fake recall against every decoder on the test split.
pub fn matrix_row(
    manifest: &DatasetManifest,
    base: &TrainConfig,
    decoders: &[String],
    train_decoder: &str,
    eval: &EvalConfig,
) -> MatrixRow {
    let config = TrainConfig {
        decoder_ids: vec![train_decoder.to_string()],
        seed: derive_seed(&[&base.seed.to_le_bytes(), b"row", train_decoder.as_bytes()]),
        ..base.clone()
    };
    let result = train(manifest, &config)
        .map_err(EvalError::from)
        .and_then(|out| {
            let cfg = EvalConfig {
                decoders: decoders.to_vec(),
                ..eval.clone()
            };
            let report = evaluate(&out.best, manifest, &cfg)?;
            Ok(RowResult {
                report,
                best_epoch: out.best_epoch,
                best_valid_acc: out.log.best().map_or(0.0, |e| e.valid_acc),
            })
        })
        .map_err(|e| {
            log::warn!("matrix row {train_decoder} failed: {e}");
            e.to_string()
        });
    MatrixRow {
        train_decoder: train_decoder.to_string(),
        result,
    }
}

/// Trains one detector per decoder and evaluates each against all
/// decoders. A failed row is recorded and the matrix is still returned.
pub fn generalisation_matrix(
    manifest: &DatasetManifest,
    base: &TrainConfig,
    decoders: &[String],
    eval: &EvalConfig,
) -> Result<GeneralisationMatrix, EvalError> {
    if decoders.len() < 2 {
        return Err(EvalError::Invalid(
            "the matrix needs at least two decoders".into(),
        ));
    }
    let rows = decoders
        .iter()
        .map(|d| matrix_row(manifest, base, decoders, d, eval))
        .collect();
    Ok(GeneralisationMatrix {
        decoders: decoders.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectReport {
    /// `(window start in seconds, probability of being synthetic)`.
    pub windows: Vec<(f64, f32)>,
    /// Fraction of windows with probability above 0.5. This is a count of
    /// flagged windows, not an estimate of how much of the audio is
    /// machine-made.
    pub flagged_fraction: f64,
}

impl DetectReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("window_start_s,probability\n");
        for (t, p) in &self.windows {
            s.push_str(&format!("{t:.3},{p:.6}\n"));
        }
        s
    }
}

/// Scores sliding windows of one file. There are `⌊duration / stride⌋`
/// windows starting every `stride` seconds; a window that would run past the
/// end is moved back to end with the file.
pub fn detect(
    model: &ModelParams,
    audio_path: &Path,
    stride_seconds: f64,
    stft: &StftParams,
) -> Result<DetectReport, EvalError> {
    if !(stride_seconds > 0.0) {
        return Err(EvalError::Invalid("stride must be positive".into()));
    }
    let pre = Preprocess::new(model.arch.representation, *stft);
    let win = snippet_samples(&pre);
    let mut clip = read_wav(audio_path)?;
    if clip.sample_rate() != stft.sample_rate {
        clip = resample(&clip, stft.sample_rate)?;
    }
    let mono = plain_mono(&clip)?;
    if mono.len() < win {
        return Err(EvalError::TooShort {
            path: audio_path.to_path_buf(),
            seconds: mono.duration(),
            needed: win as f64 / stft.sample_rate as f64,
        });
    }
    let stride = ((stride_seconds * stft.sample_rate as f64).round() as usize).max(1);
    let count = (mono.len() / stride).max(1);
    let starts: Vec<usize> = (0..count)
        .map(|k| (k * stride).min(mono.len() - win))
        .collect();
    let [c, h, w] = pre.item_shape(win);
    let mut windows = Vec::with_capacity(count);
    for chunk in starts.chunks(crate::training::EVAL_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * c * h * w);
        for &s in chunk {
            data.extend(pre.apply(&mono.slice(s, win)?)?.data);
        }
        let inputs = Tensor::from_vec(&[chunk.len(), c, h, w], data).expect("sizes agree");
        let probs = model_forward(model, &inputs, pre.kind)?;
        for (&s, p) in chunk.iter().zip(probs) {
            windows.push((s as f64 / stft.sample_rate as f64, p));
        }
    }
    let flagged = windows.iter().filter(|(_, p)| *p > 0.5).count();
    Ok(DetectReport {
        flagged_fraction: flagged as f64 / windows.len() as f64,
        windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov(source: &str) -> Provenance {
        Provenance {
            track_id: "t".into(),
            source: source.into(),
            offset: 0.0,
        }
    }

    #[test]
    fn report_counts_are_consistent() {
        let sources: Vec<String> = ["real", "a", "b"].iter().map(|s| s.to_string()).collect();
        let provenance = vec![prov("real"), prov("real"), prov("a"), prov("a"), prov("b")];
        let probs = [0.2, 0.7, 0.9, 0.5, 0.51];
        let r = report_from(&sources, &provenance, &probs, 2, 0);
        assert_eq!(r.recall("real"), Some(0.5));
        assert_eq!(r.recall("a"), Some(0.5));
        assert_eq!(r.recall("b"), Some(1.0));
        assert!((r.overall_accuracy - 3.0 / 5.0).abs() < 1e-12);
        assert_eq!(r.overall_accuracy, r.accuracy_from_counts());
        assert!(r.to_csv().ends_with("overall,3,5,0.600000\n"));
    }

    #[test]
    fn constant_half_output_predicts_real() {
        let sources: Vec<String> = ["real", "a"].iter().map(|s| s.to_string()).collect();
        let provenance = vec![prov("real"), prov("a")];
        let r = report_from(&sources, &provenance, &[0.5, 0.5], 1, 0);
        assert_eq!(r.recall("real"), Some(1.0));
        assert_eq!(r.recall("a"), Some(0.0));
    }
}
