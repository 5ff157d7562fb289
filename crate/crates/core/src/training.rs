//! Training loop: seeded batches, Adam updates, per-epoch validation on a
//! frozen snippet set, early stopping and best-model selection.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    derive_seed, plan_eval_set, plan_training_batch, render, DatasetError, DatasetManifest,
    ItemPlan, Preprocess, SnippetBatch, Split,
};
use crate::nn::{
    adam_step, model_backward, model_forward, AdamConfig, AdamState, Architecture, ModelParams,
    NnError,
};
use crate::spectral::{RepresentationKind, StftParams};

/// Items rendered and scored together during evaluation.
pub const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub representation: RepresentationKind,
    /// Decoders whose reconstructions form the fake class. Empty means every
    /// decoder in the manifest.
    pub decoder_ids: Vec<String>,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub augment: bool,
    /// Validation snippets per class source.
    pub valid_snippets: usize,
    pub stft: StftParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            representation: RepresentationKind::Amplitude,
            decoder_ids: Vec::new(),
            batch_size: 16,
            steps_per_epoch: 200,
            max_epochs: 10,
            patience: 3,
            seed: 0,
            adam: AdamConfig::default(),
            augment: true,
            valid_snippets: 32,
            stft: StftParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.steps_per_epoch == 0 {
            return Err(TrainError::Config(
                "patience, max_epochs and steps_per_epoch must be positive".into(),
            ));
        }
        if self.valid_snippets == 0 {
            return Err(TrainError::Config("valid_snippets must be positive".into()));
        }
        self.stft
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }

    /// The configured decoders, or every manifest decoder when unset.
    pub fn resolved_decoders(&self, manifest: &DatasetManifest) -> Vec<String> {
        if self.decoder_ids.is_empty() {
            manifest.decoder_ids.clone()
        } else {
            self.decoder_ids.clone()
        }
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess::new(self.representation, self.stft)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
        /// Best parameters seen before the divergence.
        last_good: Box<ModelParams>,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub valid_acc: f64,
    /// Wall-clock duration of the epoch.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        // first epoch reaching the maximum, matching model selection
        self.epochs
            .iter()
            .fold(None, |best: Option<&EpochRecord>, e| match best {
                Some(b) if b.valid_acc >= e.valid_acc => Some(b),
                _ => Some(e),
            })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,valid_acc,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.3}\n",
                e.epoch, e.train_loss, e.train_acc, e.valid_acc, e.seconds
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::File::create(path)?.write_all(self.to_csv().as_bytes())
    }
}

/// Stops once `patience` epochs pass without a strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub epochs_seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_seen: 0,
        }
    }

    /// Records an epoch's score; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        self.epochs_seen += 1;
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch >= self.best_epoch + self.patience
    }
}

/// Probabilities for planned items, rendered in fixed-size chunks.
pub fn predict_plans(
    model: &ModelParams,
    plans: &[ItemPlan],
    pre: &Preprocess,
) -> Result<Vec<f32>, TrainError> {
    let mut out = Vec::with_capacity(plans.len());
    for chunk in plans.chunks(EVAL_CHUNK) {
        let batch = render(chunk, pre)?;
        out.extend(model_forward(model, &batch.inputs, batch.kind)?);
    }
    Ok(out)
}

/// Fraction of items where `p > 0.5` agrees with the label.
pub fn accuracy(probs: &[f32], labels: &[f32]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p > 0.5) == (y > 0.5))
        .count();
    correct as f64 / probs.len() as f64
}

fn check_finite(model: &ModelParams) -> Option<String> {
    model
        .tensors
        .iter()
        .find(|(_, t)| !t.all_finite())
        .map(|(k, _)| k.clone())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub log: TrainLog,
}

/// Trains a detector from scratch. Every random draw derives from
/// `config.seed`, so two runs with the same inputs produce identical
/// parameters and logs apart from the timing column.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let decoders = config.resolved_decoders(manifest);
    let pre = config.preprocess();
    let valid_plans = plan_eval_set(
        manifest,
        Split::Valid,
        &decoders,
        config.valid_snippets,
        derive_seed(&[&config.seed.to_le_bytes(), b"valid"]),
    )?;
    let valid_labels: Vec<f32> = valid_plans.iter().map(|p| p.provenance.label()).collect();
    // rendered once: the validation set is identical every epoch
    let valid_batches: Vec<SnippetBatch> = valid_plans
        .chunks(EVAL_CHUNK)
        .map(|c| render(c, &pre))
        .collect::<Result<_, _>>()?;
    // fail early on an empty training split
    plan_training_batch(manifest, Split::Train, &decoders, 1, 0, &pre, false)?;

    let mut model: ModelParams = ModelParams::init(
        Architecture::detector(config.representation),
        derive_seed(&[&config.seed.to_le_bytes(), b"init"]),
    );
    let mut adam = AdamState::new(&model.tensors);
    let mut stop = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut log = TrainLog::default();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let (mut loss_sum, mut correct, mut seen) = (0f64, 0usize, 0usize);
        for step in 0..config.steps_per_epoch {
            let seed = derive_seed(&[
                &config.seed.to_le_bytes(),
                b"batch",
                &(epoch as u64).to_le_bytes(),
                &(step as u64).to_le_bytes(),
            ]);
            let plans = plan_training_batch(
                manifest,
                Split::Train,
                &decoders,
                config.batch_size,
                seed,
                &pre,
                config.augment,
            )?;
            let batch = render(&plans, &pre)?;
            let g = model_backward(&model, &batch.inputs, batch.kind, &batch.labels)?;
            let diverged = |reason: String| TrainError::Diverged {
                epoch,
                step,
                reason,
                last_good: Box::new(best.clone()),
            };
            if !g.loss.is_finite() {
                return Err(diverged(format!("loss is {}", g.loss)));
            }
            match adam_step(&mut model.tensors, &g.grads, &mut adam, &config.adam) {
                Ok(()) => {}
                Err(NnError::NonFiniteGradient { name }) => {
                    return Err(diverged(format!("non-finite gradient in {name}")))
                }
                Err(e) => return Err(e.into()),
            }
            if let Some(name) = check_finite(&model) {
                return Err(diverged(format!("parameter {name} became non-finite")));
            }
            loss_sum += g.loss as f64;
            correct += g
                .probabilities
                .iter()
                .zip(&batch.labels)
                .filter(|(&p, &y)| (p > 0.5) == (y > 0.5))
                .count();
            seen += batch.len();
        }
        let mut probs = Vec::with_capacity(valid_labels.len());
        for b in &valid_batches {
            probs.extend(model_forward(&model, &b.inputs, b.kind)?);
        }
        let valid_acc = accuracy(&probs, &valid_labels);
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / config.steps_per_epoch as f64,
            train_acc: correct as f64 / seen as f64,
            valid_acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.3} valid acc {:.3} ({:.1}s)",
            record.train_loss,
            record.train_acc,
            record.valid_acc,
            record.seconds
        );
        log.epochs.push(record);
        if stop.observe(epoch, valid_acc) {
            best = model.clone();
        }
        if stop.should_stop(epoch) {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch: stop.best_epoch,
        log,
    })
}
