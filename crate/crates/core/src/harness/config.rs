use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::cnn::TrainParams;
use crate::dataset::SegmentParams;
use crate::intuition::IntuitionOptions;

/// Input files and the directory that receives every artifact. Relative
/// paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentParams {
    /// Deficient sets `s = 0..=s_max` are generated.
    pub s_max: usize,
    /// Eigen-images kept per (class, filter).
    pub delta: usize,
    /// Gate thresholds evaluated by `sweep`.
    pub thresholds: Vec<f64>,
    /// Threshold shown by `report` when none is given.
    pub report_threshold: f64,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            s_max: 16,
            delta: 3,
            thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95],
            report_threshold: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub segmentation: SegmentParams,
    #[serde(default)]
    pub experiment: ExperimentParams,
    #[serde(default)]
    pub training: TrainParams,
    #[serde(default)]
    pub intuition: IntuitionOptions,
}

fn default_seed() -> u64 {
    2024
}

impl ExperimentConfig {
    /// Reads, resolves and validates a TOML config.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Usage(format!("invalid config: {e}")))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [
            &mut p.train_images,
            &mut p.train_labels,
            &mut p.test_images,
            &mut p.test_labels,
            &mut p.work_dir,
        ] {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let e = &self.experiment;
        if e.s_max < 1 {
            return Err(HarnessError::Usage("s_max must be at least 1".into()));
        }
        if e.delta < 1 {
            return Err(HarnessError::Usage("delta must be at least 1".into()));
        }
        if e.thresholds.is_empty() {
            return Err(HarnessError::Usage("at least one threshold is required".into()));
        }
        for &t in e.thresholds.iter().chain([&e.report_threshold]) {
            if !(0.0..=1.0).contains(&t) {
                return Err(HarnessError::Usage(format!("threshold {t} outside [0, 1]")));
            }
        }
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 || !(t.learning_rate > 0.0) || !(t.init_scale > 0.0) {
            return Err(HarnessError::Usage(
                "training needs positive epochs, batch_size, learning_rate and init_scale".into(),
            ));
        }
        let p = &self.paths;
        for input in [&p.train_images, &p.train_labels, &p.test_images, &p.test_labels] {
            if !input.is_file() {
                return Err(HarnessError::Data(format!("input file {} not found", input.display())));
            }
        }
        Ok(())
    }

    /// Canonical TOML rendering, used in sidecars.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
