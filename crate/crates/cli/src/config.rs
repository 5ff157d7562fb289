//! The run configuration file.

use std::fmt;
use std::path::{Path, PathBuf};

use aimd_core::dataset::Split;
use aimd_core::reconstruction::{check_unique_ids, CodecTrainConfig, DecoderConfig, DecoderSpec};
use aimd_core::robustness::{TransformKind, TransformSpec};
use aimd_core::spectral::StftParams;
use aimd_core::training::TrainConfig;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// A configuration problem, reported under the `config` category.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    /// Snippets per class source.
    pub n_snippets: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            n_snippets: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub stride_seconds: f64,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self {
            stride_seconds: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Directory of real WAV tracks.
    pub corpus_dir: Option<PathBuf>,
    /// Shell template for the reencode transform; see the README.
    pub encoder_command: Option<String>,
    #[serde(default)]
    pub stft: StftParams,
    #[serde(default)]
    pub decoders: Vec<DecoderSpec>,
    #[serde(default)]
    pub codec: CodecTrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub transforms: Vec<TransformSpec>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: default_out(),
            corpus_dir: None,
            encoder_command: None,
            stft: StftParams::default(),
            decoders: Vec::new(),
            codec: CodecTrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            detect: DetectSection::default(),
            transforms: Vec::new(),
        }
    }
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| invalid(format!("{}: {}", path.display(), e.message())))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let base = if base.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            base
        };
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    /// Makes every relative path in the file relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        absolutize(base, &mut self.out_dir);
        if let Some(c) = &mut self.corpus_dir {
            absolutize(base, c);
        }
        for d in &mut self.decoders {
            match &mut d.config {
                DecoderConfig::Toycodec { checkpoint, .. } => absolutize(base, checkpoint),
                DecoderConfig::External { dir, .. } => absolutize(base, dir),
                DecoderConfig::Griffinmel { .. } => {}
            }
        }
    }

    /// Propagates the global seed and STFT settings into the sections and
    /// the encoder template into reencode transforms.
    pub fn finalize(&mut self) {
        self.train.seed = self.seed;
        self.train.stft = self.stft;
        self.codec.seed = self.seed;
        for t in &mut self.transforms {
            if let TransformKind::Reencode { command, .. } = &mut t.kind {
                if command.is_none() {
                    command.clone_from(&self.encoder_command);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate().map_err(|e| invalid(e.to_string()))?;
        check_unique_ids(&self.decoders).map_err(|e| invalid(e.to_string()))?;
        for d in &self.decoders {
            d.validate().map_err(|e| invalid(e.to_string()))?;
        }
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        for t in &self.transforms {
            t.validate().map_err(|e| invalid(e.to_string()))?;
        }
        if self.eval.n_snippets == 0 {
            return Err(invalid("eval.n_snippets must be positive"));
        }
        if !(self.detect.stride_seconds > 0.0) {
            return Err(invalid("detect.stride_seconds must be positive"));
        }
        Ok(())
    }

    pub fn corpus_dir(&self) -> Result<&Path> {
        let dir = self
            .corpus_dir
            .as_deref()
            .ok_or_else(|| invalid("corpus_dir is not set"))?;
        if !dir.is_dir() {
            return Err(invalid(format!(
                "corpus_dir {} is not a directory",
                dir.display()
            )));
        }
        Ok(dir)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serialising the resolved config")
    }
}
