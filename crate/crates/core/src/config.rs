//! Run configuration: a strict JSON document with model, ssl, optim, data
//! and task sections.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::presets::{self, Preset};
use crate::data::{DatasetSpec, ModalitySpec, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{AdamWConfig, LrSchedule};
use crate::ssl::SslConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Pretraining schedule; constant when absent.
    pub schedule: Option<LrSchedule>,
    /// Global gradient-norm clip; off when absent.
    pub max_grad_norm: Option<f64>,
    /// Steps averaged into one reduce-on-plateau evaluation.
    pub plateau_window: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        OptimConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            betas: a.betas,
            eps: a.eps,
            schedule: None,
            max_grad_norm: None,
            plateau_window: 20,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, betas: self.betas, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&b1)
            && (0.0..1.0).contains(&b2)
            && self.eps > 0.0
            && self.plateau_window > 0
            && self.max_grad_norm.is_none_or(|m| m > 0.0);
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        Ok(())
    }
}

/// One dataset: either a named preset or an explicit spec, plus the
/// synthetic generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub modalities: Vec<ModalitySpec>,
    /// Overrides the tile count of a preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_tiles: Option<usize>,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
}

impl DataEntry {
    pub fn resolve(&self) -> Result<Preset> {
        let mut p = match (&self.preset, &self.spec) {
            (Some(name), None) => preset_by_name(name, self.num_tiles.unwrap_or(64))?,
            (None, Some(spec)) => Preset { spec: spec.clone(), modalities: self.modalities.clone() },
            _ => return Err(Error::Config("a data entry needs exactly one of `preset` and `spec`".into())),
        };
        if let Some(n) = self.num_tiles {
            p.spec.num_tiles = n;
        }
        Ok(p)
    }
}

/// Looks up a preset by dataset name.
pub fn preset_by_name(name: &str, num_tiles: usize) -> Result<Preset> {
    match name {
        "toy" => Ok(presets::toy_two_modality(num_tiles)),
        "tsai-like" => Ok(presets::tsai_like(num_tiles)),
        _ => presets::table()
            .into_iter()
            .find(|p| p.spec.name == name)
            .ok_or_else(|| Error::Config(format!("unknown dataset preset `{name}`"))),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub datasets: Vec<DataEntry>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// Random backbone, everything trainable.
    Scratch,
    /// Pretrained backbone, everything trainable.
    Finetune,
    /// Pretrained backbone frozen, head only.
    #[default]
    Probe,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    #[default]
    Classify,
    Segment,
    /// Binary segmentation.
    Changedet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub mode: AdaptMode,
    pub task: TaskKind,
    /// Modality whose sub-patches carry segmentation logits.
    pub reference_modality: Option<String>,
    /// Number of classes; taken from the dataset when absent.
    pub num_classes: Option<usize>,
    pub multilabel: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// Head learning rate; `optim.lr` when absent.
    pub lr: Option<f64>,
    /// Patch size used for adaptation; the dataset's finest when absent.
    pub patch_size: Option<f64>,
    /// Segmentation from patch embeddings only.
    pub naive_segmentation: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            mode: AdaptMode::Probe,
            task: TaskKind::Classify,
            reference_modality: None,
            num_classes: None,
            multilabel: false,
            epochs: 10,
            batch_size: 8,
            lr: None,
            patch_size: None,
            naive_segmentation: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub ssl: SslConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub task: TaskConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ssl.validate()?;
        self.optim.validate()?;
        if self.task.epochs == 0 || self.task.batch_size == 0 {
            return Err(Error::Config("task epochs and batch size must be positive".into()));
        }
        for d in &self.data.datasets {
            d.synthetic.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}
