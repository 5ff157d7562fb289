//! Run directories, provenance records and error reporting.

use std::path::{Path, PathBuf};

use aimd_core::audio_io::AudioError;
use aimd_core::dataset::DatasetError;
use aimd_core::eval::EvalError;
use aimd_core::nn::NnError;
use aimd_core::reconstruction::ReconError;
use aimd_core::robustness::RobustnessError;
use aimd_core::spectral::SpectralError;
use aimd_core::training::TrainError;
use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};

/// A stamped output folder `<subcommand>-<UTC timestamp>-<seed>`.
pub struct RunDir {
    pub path: PathBuf,
}

#[derive(Serialize)]
struct Provenance<'a> {
    subcommand: &'a str,
    seed: u64,
    started_utc: String,
    tool: &'static str,
    version: &'static str,
    args: Vec<String>,
}

impl RunDir {
    pub fn create(cfg: &RunConfig, subcommand: &str) -> Result<Self> {
        std::fs::create_dir_all(&cfg.out_dir)
            .with_context(|| format!("cannot create {}", cfg.out_dir.display()))?;
        let now = chrono::Utc::now();
        let stamp = now.format("%Y%m%dT%H%M%S%.3fZ");
        let base = format!("{subcommand}-{stamp}-{}", cfg.seed);
        // create_dir fails on an existing folder, so concurrent runs with
        // the same stamp pick distinct suffixes
        let mut k = 0;
        let path = loop {
            let name = if k == 0 {
                base.clone()
            } else {
                format!("{base}-{k}")
            };
            let p = cfg.out_dir.join(name);
            match std::fs::create_dir(&p) {
                Ok(()) => break p,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => k += 1,
                Err(e) => return Err(e).with_context(|| format!("cannot create {}", p.display())),
            }
        };
        let dir = RunDir { path };
        dir.record(cfg, subcommand, now.to_rfc3339())?;
        Ok(dir)
    }

    /// Reuses an existing run directory, refreshing its provenance.
    pub fn resume(cfg: &RunConfig, subcommand: &str, path: &Path) -> Result<Self> {
        if !path.is_dir() {
            return Err(ConfigError(format!(
                "resume directory {} does not exist",
                path.display()
            ))
            .into());
        }
        let dir = RunDir {
            path: path.to_path_buf(),
        };
        dir.record(cfg, subcommand, chrono::Utc::now().to_rfc3339())?;
        Ok(dir)
    }

    fn record(&self, cfg: &RunConfig, subcommand: &str, started_utc: String) -> Result<()> {
        self.write("config.toml", &cfg.to_toml()?)?;
        let prov = Provenance {
            subcommand,
            seed: cfg.seed,
            started_utc,
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            args: std::env::args().collect(),
        };
        self.write("provenance.json", &serde_json::to_string_pretty(&prov)?)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.file(name);
        std::fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))
    }
}

/// Machine-parseable category of the outermost recognised cause.
pub fn category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return "config";
        }
        if cause.is::<TrainError>() {
            return "training";
        }
        if cause.is::<RobustnessError>() {
            if let Some(RobustnessError::ToolMissing(_)) = cause.downcast_ref() {
                return "tool-missing";
            }
            return "robustness";
        }
        if cause.is::<EvalError>() {
            return "eval";
        }
        if cause.is::<ReconError>() {
            return "reconstruction";
        }
        if cause.is::<DatasetError>() {
            return "dataset";
        }
        if cause.is::<NnError>() {
            return "model";
        }
        if cause.is::<AudioError>() {
            return "audio";
        }
        if cause.is::<SpectralError>() {
            return "dsp";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

/// `category: message` on a single line.
pub fn error_line(err: &anyhow::Error) -> String {
    let msg = format!("{err:#}").replace(['\n', '\r'], " ");
    format!("{}: {msg}", category(err))
}
