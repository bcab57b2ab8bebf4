//! Student/teacher latent-prediction pretraining: patch dropping, modality
//! and timestamp masking, the predictor, both losses and the EMA teacher.

pub mod forward;
pub mod loss;
pub mod mask;
pub mod train;

use serde::{Deserialize, Serialize};

pub use forward::{predictor, student_forward, student_tokens, teacher_forward, StudentOutput};
pub use loss::{contrastive_loss, jepa_loss};
pub use mask::{expected_drop_rate, random_drop, rectangle_drop, sample_mask_plan, DropMode, MaskConfig, MaskPlan};
pub use train::{ema_update, pretrain, tile_loss, PretrainState, StepRecord, TileLoss};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Independent per-patch dropping at the rectangle sampler's mean rate.
    pub random_drop: bool,
    /// Contrastive weight forced to zero.
    pub no_contrastive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    pub temperature: f64,
    pub ema_decay: f64,
    pub contrastive_weight: f64,
    pub mask: MaskConfig,
    pub ablation: Ablations,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            temperature: 0.1,
            ema_decay: 0.996,
            contrastive_weight: 1.0,
            mask: MaskConfig::default(),
            ablation: Ablations::default(),
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay <= 1.0) {
            return Err(Error::Config(format!("EMA decay must lie in (0, 1], got {}", self.ema_decay)));
        }
        if !(self.contrastive_weight >= 0.0) {
            return Err(Error::Config("contrastive weight must be non-negative".into()));
        }
        self.mask.validate()
    }

    /// Contrastive weight after ablations.
    pub fn effective_contrastive_weight(&self) -> f64 {
        if self.ablation.no_contrastive {
            0.0
        } else {
            self.contrastive_weight
        }
    }
}
