//! Run configuration: one JSON document, optionally overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use petseg_core::{Connectivity, NetworkConfig, PatchSpec, SlidingWindowSpec, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Raw case set: `<id>_ct.nii.gz`, `<id>_suv.nii.gz`, `<id>_seg.nii.gz`.
    pub data_dir: PathBuf,
    /// Root of every derived artifact.
    pub output_dir: PathBuf,
    /// Explicit case ids; every case in `data_dir` when absent.
    pub cases: Option<Vec<String>>,
    /// Number of cases written by `synth`.
    pub synth_cases: usize,
    /// Masks read by `evaluate`; defaults to the `predict` output.
    pub predictions_dir: Option<PathBuf>,
    pub patch: PatchSpec,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub window: SlidingWindowSpec,
    pub connectivity: Connectivity,
    /// Likelihood threshold for the final masks.
    pub threshold: f64,
    /// Master seed for data generation and training.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("run"),
            cases: None,
            synth_cases: 8,
            predictions_dir: None,
            patch: PatchSpec::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            window: SlidingWindowSpec::default(),
            connectivity: Connectivity::default(),
            threshold: 0.5,
            seed: 0,
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub folds: Option<usize>,
}

impl RunConfig {
    /// Reads `path`, resolving relative directories against the file's
    /// own directory, then applies `overrides`.
    pub fn load(path: &Path, overrides: Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for dir in [&mut cfg.data_dir, &mut cfg.output_dir] {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        if let Some(dir) = cfg.predictions_dir.as_mut().filter(|d| d.is_relative()) {
            *dir = base.join(&*dir);
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(f) = o.folds {
            self.train.folds = f;
        }
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.synth_cases == 0 {
            bail!("synth_cases must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            bail!("threshold {} outside [0, 1]", self.threshold);
        }
        self.patch.validate()?;
        self.network.validate()?;
        self.network.validate_patch(self.patch.size)?;
        self.network.validate_patch(self.window.patch)?;
        self.train.validate()?;
        self.window.validate()?;
        Ok(())
    }

    pub fn preprocessed_dir(&self) -> PathBuf {
        self.output_dir.join("preprocessed")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn prediction_dir(&self) -> PathBuf {
        self.predictions_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("predictions"))
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.output_dir.join("metrics.csv")
    }

    pub fn metrics_jsonl(&self) -> PathBuf {
        self.output_dir.join("metrics.jsonl")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"data_dir": "raw", "seed": 3, "train": {"epochs": 9, "folds": 4}}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(
            &path,
            Overrides {
                seed: Some(5),
                epochs: None,
                folds: Some(2),
            },
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.train.seed, 5);
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.folds, 2);
        assert_eq!(cfg.data_dir, dir.path().join("raw"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"epochs": 3}"#).unwrap();
        assert!(RunConfig::load(&path, Overrides::default()).is_err());
    }

    #[test]
    fn patch_must_fit_the_network() {
        let mut cfg = RunConfig::default();
        cfg.patch.size = [30, 48, 32];
        assert!(cfg.validate().is_err());
    }
}
