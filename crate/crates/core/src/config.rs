//! Run configuration files (TOML) and resolved-config snapshots.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::StaConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::SceneConfig;
use crate::train::TrainConfig;

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub dump_seq: Option<PathBuf>,
}

/// Command-specific settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Samples written by `gen-data`.
    pub count: usize,
    /// Train on the first `overfit` scenes only (0 = all available).
    pub overfit: usize,
    /// Scenes generated in memory when `train` has no data directory.
    pub generated_scenes: usize,
    pub checkpoint_every: u64,
    /// Refinement iterations at inference (0 = model default).
    pub iters: usize,
    pub dump_masks: bool,
    pub dump_points: Option<[usize; 2]>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            count: 4,
            overfit: 0,
            generated_scenes: 4,
            checkpoint_every: 0,
            iters: 0,
            dump_masks: false,
            dump_points: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<String>,
    /// 0 = quiet, 1 = progress lines.
    pub verbosity: u8,
    pub paths: Paths,
    pub run: RunSection,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub sta: StaConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parse strictly; unknown keys and type errors report file, line and
    /// column.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.sta.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// Write `resolved_config.toml` into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_report_their_line() {
        let err = RunConfig::from_toml("[model]\npoints = 4\nbogus = 1\n", Path::new("run.toml")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("run.toml") && msg.contains("line 3"), "{msg}");
        assert!(matches!(err, Error::Config(_)));
    }
}
