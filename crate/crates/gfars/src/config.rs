//! Run configuration: one TOML document wiring every module's settings.
//!
//! A run is a pure function of (inputs, config, seed), so the resolved
//! config is persisted beside the outputs of every run that writes any;
//! re-running against that file reproduces the artifacts byte for byte.
//! Precedence: explicit CLI flags > `GFARS_SEED` > config file > defaults.

use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::scorefield::ScoreNetConfig;
use crate::sde::SdeSchedule;
use crate::synthdata::DatasetManifest;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable that overrides every seed in the config.
pub const SEED_ENV: &str = "GFARS_SEED";

/// File name of the persisted resolved config.
pub const RESOLVED_NAME: &str = "run-config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Output width D of the per-part encoder (shared MLP is 3 -> 64 ->
    /// 128 -> D).
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { feature_dim: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Directory receiving checkpoints, history, metrics, and the resolved
    /// config copy.
    pub out_dir: PathBuf,
    /// Training split (JSON lines of mixed part sets).
    pub train_data: PathBuf,
    /// Validation split used for best-checkpoint selection.
    pub val_data: PathBuf,
    /// Held-out split for final evaluation.
    pub test_data: PathBuf,
    pub dataset: DatasetManifest,
    pub encoder: EncoderConfig,
    pub net: ScoreNetConfig,
    pub sched: SdeSchedule,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    /// Auto-regressive iteration cap for grouping runs.
    pub max_iter: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            train_data: PathBuf::from("data/train.jsonl"),
            val_data: PathBuf::from("data/val.jsonl"),
            test_data: PathBuf::from("data/test.jsonl"),
            dataset: DatasetManifest::default(),
            encoder: EncoderConfig::default(),
            net: ScoreNetConfig::default(),
            sched: SdeSchedule::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            max_iter: crate::grouping::DEFAULT_MAX_ITER,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.feature_dim == 0 {
            return Err(Error::Config("encoder.feature_dim must be >= 1".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        self.dataset.validate()?;
        self.net.validate()?;
        self.sched.validate()?;
        self.sampler.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }

    /// Re-seed every stream from one master value (the `GFARS_SEED`
    /// contract collapses the per-section seeds).
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.sampler.seed = seed;
        self.train.seed = seed;
    }

    /// Apply the `GFARS_SEED` environment override if present.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Some(seed) = seed_from_env()? {
            self.override_seed(seed);
        }
        Ok(())
    }

    /// Write the resolved config into `dir` (creating it) and return the
    /// file path.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

/// Parse `GFARS_SEED` when set; a set-but-unparsable value is a config
/// error, not a silent fallback.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not a u64"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
    }
}

/// Seed precedence for subcommands: explicit flag, then environment, then
/// the given fallback.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    Ok(seed_from_env()?.unwrap_or(fallback))
}
