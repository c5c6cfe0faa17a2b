//! Experiment configuration: one TOML file with a section per stage, and
//! the hash that tags every artifact produced from it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Pose, SyntheticIdentityConfig};
use crate::error::{Error, Result};
use crate::explain::LimeConfig;
use crate::graph::ScaleConfig;
use crate::prune::PruneSchedule;
use crate::seed::derive_seed;
use crate::train::{TrainConfig, DEFAULT_LR_LADDER};
use crate::verify::ProtocolConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub image_size: usize,
    pub noise: f64,
    #[serde(default = "one")]
    pub distinctiveness: f64,
    #[serde(default = "default_holdout")]
    pub validation_fraction: f64,
    #[serde(default = "all_poses")]
    pub poses: Vec<Pose>,
}

/// Held-out identities scored with the verification protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationConfig {
    pub identities: usize,
    pub images_per_pose: usize,
    #[serde(default = "default_template_sizes")]
    pub template_sizes: Vec<usize>,
    pub impostor_window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainConfig {
    /// One retraining run per ladder; each starts at its first rate.
    #[serde(default = "default_ladders")]
    pub ladders: Vec<Vec<f64>>,
    #[serde(default = "default_retrain_epochs")]
    pub max_epochs: usize,
    /// Pruning levels whose checkpoints are retrained and evaluated.
    #[serde(default = "default_levels")]
    pub at_sparsities: Vec<f64>,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            ladders: default_ladders(),
            max_epochs: default_retrain_epochs(),
            at_sparsities: default_levels(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainConfig {
    #[serde(default)]
    pub lime: LimeConfig,
    /// Verification images explained per network (first in file order).
    #[serde(default = "default_explain_images")]
    pub images: usize,
    #[serde(default = "default_levels")]
    pub at_sparsities: Vec<f64>,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            lime: LimeConfig::default(),
            images: default_explain_images(),
            at_sparsities: default_levels(),
            bins: default_bins(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub verification: VerificationConfig,
    pub model: ScaleConfig,
    pub train: TrainConfig,
    pub prune: PruneSchedule,
    #[serde(default)]
    pub retrain: RetrainConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
    /// Run directory. Not serialized, so it does not enter the hash.
    #[serde(default, skip_serializing)]
    pub output: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

fn default_holdout() -> f64 {
    0.2
}

fn all_poses() -> Vec<Pose> {
    Pose::ALL.to_vec()
}

fn default_template_sizes() -> Vec<usize> {
    vec![1, 5]
}

fn default_ladders() -> Vec<Vec<f64>> {
    vec![DEFAULT_LR_LADDER.to_vec(), vec![0.001, 0.0001]]
}

fn default_retrain_epochs() -> usize {
    30
}

fn default_levels() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5]
}

fn default_explain_images() -> usize {
    16
}

fn default_bins() -> usize {
    20
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(format!("config file {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    /// Canonical TOML of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML, hex-encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model.class_count != self.data.identities {
            return bad(format!(
                "model class_count {} differs from data identities {}",
                self.model.class_count, self.data.identities
            ));
        }
        self.model.validate()?;
        self.synthetic_config().validate()?;
        self.verification_data_config().validate()?;
        if !(0.0..1.0).contains(&self.data.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)".into());
        }
        let a = &self.train.augment;
        if a.resize < a.crop || a.crop != self.model.input_size {
            return bad(format!(
                "augment crop {} must equal the model input size {}",
                a.crop, self.model.input_size
            ));
        }
        if self.model.input_channels != 1 {
            return bad("synthetic faces are single-channel; set model.input_channels = 1".into());
        }
        self.train.validate()?;
        self.prune.validate()?;
        if self.verification.template_sizes.is_empty() {
            return bad("verification needs at least one template size".into());
        }
        for &t in &self.verification.template_sizes {
            self.protocol(t).validate()?;
        }
        for l in &self.retrain.ladders {
            if l.is_empty() || l.windows(2).any(|w| w[1] >= w[0]) {
                return bad(format!("retrain ladder {l:?} must be non-empty and strictly decreasing"));
            }
        }
        for s in self.retrain.at_sparsities.iter().chain(&self.explain.at_sparsities) {
            if !(*s > 0.0 && *s < 1.0) {
                return bad(format!("sparsity level {s} must lie in (0, 1)"));
            }
        }
        self.explain.lime.validate()?;
        if self.explain.bins == 0 {
            return bad("explain.bins must be at least 1".into());
        }
        Ok(())
    }

    pub fn synthetic_config(&self) -> SyntheticIdentityConfig {
        SyntheticIdentityConfig {
            identities: self.data.identities,
            images_per_identity: self.data.images_per_identity,
            image_size: self.data.image_size,
            poses: self.data.poses.clone(),
            seed: derive_seed(self.seed, "data"),
            noise: self.data.noise,
            distinctiveness: self.data.distinctiveness,
        }
    }

    /// Disjoint identities (their own shape seed) with `images_per_pose`
    /// images in every pose.
    pub fn verification_data_config(&self) -> SyntheticIdentityConfig {
        SyntheticIdentityConfig {
            identities: self.verification.identities,
            images_per_identity: self.verification.images_per_pose * self.data.poses.len(),
            seed: derive_seed(self.seed, "verification-data"),
            ..self.synthetic_config()
        }
    }

    pub fn protocol(&self, template_size: usize) -> ProtocolConfig {
        ProtocolConfig {
            subjects: self.verification.identities,
            images_per_pose: self.verification.images_per_pose,
            poses: self.data.poses.len(),
            template_size,
            impostor_window: self.verification.impostor_window,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn prune_schedule(&self) -> PruneSchedule {
        PruneSchedule {
            seed: derive_seed(self.seed, "prune"),
            ..self.prune.clone()
        }
    }

    pub fn retrain_config(&self, ladder: &[f64], iteration: usize) -> TrainConfig {
        TrainConfig {
            lr_ladder: ladder.to_vec(),
            max_epochs: self.retrain.max_epochs,
            seed: derive_seed(self.seed, &format!("retrain/{}/{iteration}", ladder_name(ladder))),
            ..self.train.clone()
        }
    }

    pub fn lime_config(&self) -> LimeConfig {
        LimeConfig {
            seed: derive_seed(self.seed, "lime"),
            ..self.explain.lime.clone()
        }
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, "model")
    }
}

/// `lr<first rate>`, e.g. `lr0.01`.
pub fn ladder_name(ladder: &[f64]) -> String {
    format!("lr{}", ladder.first().copied().unwrap_or(0.0))
}
