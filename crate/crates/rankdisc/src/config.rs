//! Run configuration: a single TOML file covering data source, split,
//! backbone, per-stage schedules and ablation switches. Validated as a whole;
//! a digest of the canonical serialization ties checkpoints and reports to
//! the configuration that produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentSpec, SplitSpec};
use crate::losses::RampUpSchedule;
use crate::model::BackboneConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic { n_per_class: usize, classes: usize },
    Idx { images: PathBuf, labels: PathBuf },
}

/// Shared per-stage schedule shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay_factor`;
    /// defaults to a single decay at 70% of the stage.
    #[serde(default)]
    pub lr_decay_at: Option<Vec<usize>>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    pub batch_size: usize,
}

fn default_decay_factor() -> f64 {
    0.1
}

impl StageConfig {
    pub fn decay_epochs(&self) -> Vec<usize> {
        match &self.lr_decay_at {
            Some(v) => v.clone(),
            None => vec![(self.epochs as f64 * 0.7).round() as usize],
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for &m in &self.decay_epochs() {
            if epoch >= m {
                lr *= self.lr_decay_factor;
            }
        }
        lr
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage3Config {
    #[serde(flatten)]
    pub schedule: StageConfig,
    /// Top-k set size for the rank-statistics pseudo-labels.
    pub k: usize,
    /// Consistency ramp-up omega(t).
    pub ramp: RampUpSchedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncrementalConfig {
    /// Weight of the pseudo-label cross-entropy on unlabelled data; ramped
    /// with the same schedule shape as the consistency term.
    #[serde(default = "default_inc_coeff")]
    pub ce_coefficient: f64,
}

fn default_inc_coeff() -> f64 {
    0.05
}

impl Default for IncrementalConfig {
    fn default() -> Self {
        IncrementalConfig {
            ce_coefficient: default_inc_coeff(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    #[serde(default)]
    pub no_bce: bool,
    #[serde(default)]
    pub no_ce: bool,
    #[serde(default)]
    pub no_consistency: bool,
    #[serde(default)]
    pub no_selfsup: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub split: SplitSpec,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub augment: AugmentSpec,
    #[serde(default = "default_stage1")]
    pub stage1: StageConfig,
    #[serde(default = "default_stage2")]
    pub stage2: StageConfig,
    #[serde(default = "default_stage3")]
    pub stage3: Stage3Config,
    #[serde(default)]
    pub incremental: IncrementalConfig,
    #[serde(default)]
    pub ablation: AblationFlags,
}

pub fn default_stage1() -> StageConfig {
    StageConfig {
        epochs: 30,
        lr: 0.1,
        momentum: 0.9,
        lr_decay_at: None,
        lr_decay_factor: 0.1,
        batch_size: 128,
    }
}

pub fn default_stage2() -> StageConfig {
    StageConfig {
        epochs: 20,
        lr: 0.1,
        momentum: 0.9,
        lr_decay_at: None,
        lr_decay_factor: 0.1,
        batch_size: 128,
    }
}

pub fn default_stage3() -> Stage3Config {
    Stage3Config {
        schedule: StageConfig {
            epochs: 40,
            lr: 0.1,
            momentum: 0.9,
            lr_decay_at: None,
            lr_decay_factor: 0.1,
            batch_size: 128,
        },
        k: 5,
        ramp: RampUpSchedule {
            lambda: 5.0,
            ramp_length: 10,
        },
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{path:?}: {e}")]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whole-config validation; collects every problem into one report.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::Config(mut p)) = self.backbone.validate() {
            problems.append(&mut p);
        }
        if let Err(e) = self.split.validate() {
            problems.push(e.to_string());
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                n_per_class,
                classes,
            } => {
                if *n_per_class == 0 {
                    problems.push("dataset: n_per_class must be >= 1".into());
                }
                if *classes == 0 || *classes > crate::data::SYNTH_MAX_CLASSES {
                    problems.push(format!(
                        "dataset: classes must be in 1..={}",
                        crate::data::SYNTH_MAX_CLASSES
                    ));
                }
            }
            DatasetConfig::Idx { .. } => {}
        }
        let d = self.backbone.feature_dim;
        if self.stage3.k == 0 || self.stage3.k > d {
            problems.push(format!(
                "stage3: k={} must be in 1..=feature_dim ({d})",
                self.stage3.k
            ));
        }
        if d < self.split.n_unlabelled() {
            problems.push(format!(
                "backbone: feature_dim {d} must be >= C^u {}",
                self.split.n_unlabelled()
            ));
        }
        for (name, s) in [
            ("stage1", &self.stage1),
            ("stage2", &self.stage2),
            ("stage3", &self.stage3.schedule),
        ] {
            if s.lr <= 0.0 {
                problems.push(format!("{name}: lr must be positive"));
            }
            if !(0.0..1.0).contains(&s.momentum) {
                problems.push(format!("{name}: momentum must be in [0, 1)"));
            }
            if s.batch_size == 0 {
                problems.push(format!("{name}: batch_size must be >= 1"));
            }
            if s.lr_decay_factor <= 0.0 || s.lr_decay_factor > 1.0 {
                problems.push(format!("{name}: lr_decay_factor must be in (0, 1]"));
            }
        }
        if self.stage3.ramp.lambda < 0.0 {
            problems.push("stage3: ramp lambda must be nonnegative".into());
        }
        if self.stage3.ramp.ramp_length == 0 {
            problems.push("stage3: ramp length must be >= 1".into());
        }
        if self.incremental.ce_coefficient < 0.0 {
            problems.push("incremental: ce_coefficient must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.augment.flip_p) {
            problems.push("augment: flip_p must be in [0, 1]".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// First 8 bytes of the SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> [u8; 8] {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let d = h.finalize();
        d[..8].try_into().unwrap()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Load the dataset named by the config.
    pub fn load_dataset(&self) -> Result<crate::data::Dataset> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                n_per_class,
                classes,
            } => crate::data::synth_shapes(
                *n_per_class,
                *classes,
                crate::rng::subseed(self.seed, "dataset"),
            ),
            DatasetConfig::Idx { images, labels } => crate::data::read_idx(images, labels),
        }
    }
}
