use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kd::KdDetConfig;
use crate::oim::OimConfig;
use crate::psmodel::{BackboneSize, BackboneSpec, InferenceConfig};
use crate::synthscene::DatasetConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    #[default]
    None,
    KdDet,
    KdReid,
    Both,
}

impl KdMode {
    pub fn uses_detector_teacher(self) -> bool {
        matches!(self, KdMode::KdDet | KdMode::Both)
    }

    pub fn uses_teacher_table(self) -> bool {
        matches!(self, KdMode::KdReid | KdMode::Both)
    }

    /// The configuration-file spelling.
    pub fn name(self) -> &'static str {
        match self {
            KdMode::None => "none",
            KdMode::KdDet => "kd_det",
            KdMode::KdReid => "kd_reid",
            KdMode::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub size: BackboneSize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { size: BackboneSize::Large }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Fraction of `steps` after which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
    /// Global gradient-norm clip; unset disables clipping.
    pub max_grad_norm: Option<f64>,
    pub rpn_samples: usize,
    pub rcn_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 2,
            lr: 0.01,
            momentum: 0.9,
            decay_at: 0.7,
            decay_factor: 0.1,
            max_grad_norm: Some(5.0),
            rpn_samples: 16,
            rcn_samples: 16,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if (step as f64) < self.decay_at * self.steps as f64 {
            self.lr
        } else {
            self.lr * self.decay_factor
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou: f64,
    /// Gallery detections below this score are not ranked for search.
    pub search_min_score: f64,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou: 0.5,
            search_min_score: 0.5,
            top_k: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherPaths {
    /// Checkpoint of the detector teacher.
    pub detector: Option<PathBuf>,
    /// Exported lookup table of the identity teacher.
    pub lut: Option<PathBuf>,
}

/// One training run. Serialized as TOML; every field has a default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub kd_mode: KdMode,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub oim: OimConfig,
    pub kd_det: KdDetConfig,
    pub teacher: TeacherPaths,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn spec(&self) -> BackboneSpec {
        BackboneSpec::new(self.model.size, self.oim.dim, self.dataset.image_size)
    }

    pub fn oim_weight(&self) -> f64 {
        self.oim.effective_weight(self.kd_mode.uses_teacher_table())
    }

    /// Static checks. Teacher availability is checked when teachers are
    /// resolved.
    pub fn validate(&self) -> Result<()> {
        self.oim.validate()?;
        self.kd_det.validate()?;
        if self.oim.num_labeled != self.dataset.num_labeled {
            return Err(Error::Config(format!(
                "oim.num_labeled = {} but dataset.num_labeled = {}",
                self.oim.num_labeled, self.dataset.num_labeled
            )));
        }
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 || t.rpn_samples < 2 || t.rcn_samples < 2 {
            return Err(Error::Config("train: steps, batch_size must be positive and sample counts ≥ 2".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config(format!("train: bad lr {} or momentum {}", t.lr, t.momentum)));
        }
        if !(0.0..=1.0).contains(&t.decay_at) || !(t.decay_factor > 0.0) {
            return Err(Error::Config("train: decay_at must be in [0, 1], decay_factor positive".into()));
        }
        let spec = self.spec();
        if spec.feature_size() * spec.feature_stride() != self.dataset.image_size {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of the feature stride {}",
                self.dataset.image_size,
                spec.feature_stride()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let c = ExperimentConfig::from_toml("kd_mode = \"kd_reid\"\n[model]\nsize = \"small\"\n").unwrap();
        assert_eq!(c.model.size, BackboneSize::Small);
        assert_eq!(c.oim_weight(), 0.1);
        assert_eq!(ExperimentConfig::default().oim_weight(), 1.0);
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[oim]\nnum_labeled = 3").is_err());
    }

    #[test]
    fn lr_schedule() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(0), 0.01);
        assert_eq!(t.lr_at(2099), 0.01);
        assert!((t.lr_at(2100) - 0.001).abs() < 1e-15);
    }
}
