//! Run configuration and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::AiReduction;

/// Learning-rate schedule. `Poly` decays as (1 − t/iterations)^power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    None,
    Poly { power: f64 },
}

impl LrSchedule {
    /// Learning rate for step `t` of `iterations` (t counts from 0).
    pub fn lr_at(&self, base_lr: f64, t: u64, iterations: u64) -> f64 {
        match self {
            LrSchedule::None => base_lr,
            LrSchedule::Poly { power } => {
                if iterations == 0 {
                    return base_lr;
                }
                let frac = 1.0 - t as f64 / iterations as f64;
                base_lr * frac.max(0.0).powf(*power)
            }
        }
    }
}

/// Every knob of a training run. A JSON config file may omit fields (defaults
/// fill in) but unknown keys are a hard error, so typos cannot silently
/// disable a mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the feature-consistency term.
    pub lambda: f64,
    /// Relaxation exponent of the adaptive class score.
    pub gamma: f64,
    /// Confidence EMA smoothing factor.
    pub alpha: f64,
    /// Probability floor when turning class scores into a distribution.
    pub eps_floor: f64,
    /// Per-transform application probability when drawing augmentations.
    pub p_apply: f64,
    /// Photometric jitter strength.
    pub sigma_p: f64,
    pub iterations: u64,
    pub batch_size: usize,
    /// Square crop side fed to the model.
    pub crop: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Feed the near-infrared band as a fourth input channel.
    pub use_nir: bool,
    /// Train with the two-branch consistency loss; off = plain augmentation.
    pub use_ai: bool,
    /// Pick images adaptively by class; off = uniform over images.
    pub use_as: bool,
    pub ai_stop_gradient: bool,
    pub ai_reduction: AiReduction,
    /// Let the background class participate in adaptive selection.
    pub include_background: bool,
    /// Evaluate every this many steps (0 = only at the end).
    pub eval_every: u64,
    /// Persist a resumable training state every this many steps
    /// (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.75,
            gamma: 4.0,
            alpha: 0.968,
            eps_floor: 0.01,
            p_apply: 0.5,
            sigma_p: 0.1,
            iterations: 400,
            batch_size: 8,
            crop: 32,
            lr: 0.05,
            momentum: 0.9,
            lr_schedule: LrSchedule::Poly { power: 1.0 },
            seed: 0,
            use_nir: false,
            use_ai: true,
            use_as: true,
            ai_stop_gradient: false,
            ai_reduction: AiReduction::PerElement,
            include_background: true,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<TrainConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sanity-check against the model the run will build (`stride` is the
    /// model's total downsampling factor).
    pub fn validate(&self, stride: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0,1], got {}", self.alpha));
        }
        if !(self.eps_floor > 0.0 && self.eps_floor.is_finite()) {
            return fail(format!("eps_floor must be positive, got {}", self.eps_floor));
        }
        if !(0.0..=1.0).contains(&self.p_apply) {
            return fail(format!("p_apply must lie in [0,1], got {}", self.p_apply));
        }
        if !(0.0..1.0).contains(&self.sigma_p) {
            return fail(format!("sigma_p must lie in [0,1), got {}", self.sigma_p));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.crop == 0 || self.crop % stride != 0 {
            return fail(format!(
                "crop {} must be a positive multiple of the model stride {stride}",
                self.crop
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if let LrSchedule::Poly { power } = self.lr_schedule {
            if !(power > 0.0 && power.is_finite()) {
                return fail(format!("poly power must be positive, got {power}"));
            }
        }
        Ok(())
    }
}
