//! Training configuration. Every field has a default so a JSON file only
//! needs to name what it overrides.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::DepthTrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    pub iterations: usize,
    pub sh_lr: f64,
    /// Multiplied by the scene extent (camera-centre spread).
    pub position_lr: f64,
    /// Position learning rate at the last iteration, as a fraction of the
    /// initial one; decays exponentially in between.
    pub position_lr_final_ratio: f64,
    pub opacity_lr: f64,
    pub scale_lr: f64,
    pub rotation_lr: f64,
    pub prune_interval: usize,
    pub prune_opacity_threshold: f64,
    pub densify_enabled: bool,
    pub densify_interval: usize,
    /// Mean position-gradient norm above which a point is cloned.
    pub densify_grad_threshold: f64,
    pub grad_clip: f64,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            sh_lr: 0.0025,
            position_lr: 1.6e-4,
            position_lr_final_ratio: 0.01,
            opacity_lr: 0.05,
            scale_lr: 5e-3,
            rotation_lr: 1e-3,
            prune_interval: 100,
            prune_opacity_threshold: 0.005,
            densify_enabled: false,
            densify_interval: 100,
            densify_grad_threshold: 2e-4,
            grad_clip: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub iterations: usize,
    pub appearance_lr: f64,
    /// Appearance learning rate at the last iteration relative to the
    /// initial one; decays exponentially in between.
    pub appearance_lr_final_ratio: f64,
    pub disc_lr: f64,
    pub weights: LossWeights,
    pub grad_clip: f64,
    /// Adds a wall-clock column to the loss history.
    pub record_wall_clock: bool,
    /// Write a checkpoint every this many iterations (0 = never).
    pub checkpoint_interval: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            appearance_lr: 0.025,
            appearance_lr_final_ratio: 0.1,
            disc_lr: 2e-4,
            weights: LossWeights::default(),
            grad_clip: 10.0,
            record_wall_clock: true,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct TrainConfig {
    pub seed: u64,
    pub reconstruct: ReconstructConfig,
    pub depth: DepthTrainConfig,
    pub transfer: TransferConfig,
}


fn positive(problems: &mut Vec<String>, name: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        problems.push(format!("{name} must be positive, got {v}"));
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::data::sha256_hex(self.to_json().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let r = &self.reconstruct;
        for (name, v) in [
            ("reconstruct.sh_lr", r.sh_lr),
            ("reconstruct.position_lr", r.position_lr),
            ("reconstruct.position_lr_final_ratio", r.position_lr_final_ratio),
            ("reconstruct.opacity_lr", r.opacity_lr),
            ("reconstruct.scale_lr", r.scale_lr),
            ("reconstruct.rotation_lr", r.rotation_lr),
            ("reconstruct.grad_clip", r.grad_clip),
            ("transfer.appearance_lr", self.transfer.appearance_lr),
            ("transfer.appearance_lr_final_ratio", self.transfer.appearance_lr_final_ratio),
            ("transfer.disc_lr", self.transfer.disc_lr),
            ("transfer.grad_clip", self.transfer.grad_clip),
            ("depth.lr", self.depth.lr),
        ] {
            positive(&mut p, name, v);
        }
        for (name, v) in [
            ("reconstruct.iterations", r.iterations),
            ("transfer.iterations", self.transfer.iterations),
            ("depth.steps", self.depth.steps),
        ] {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        if let Err(e) = self.transfer.weights.validate() {
            p.push(e.to_string());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(p.join("; ")))
        }
    }
}
