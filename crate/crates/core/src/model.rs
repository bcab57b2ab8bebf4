//! Model hyperparameters and the named parameter tree.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ModalitySpec;
use crate::error::{Error, Result};
use crate::nn::{init_cross_block, init_layer_norm, init_linear, init_mlp, init_self_block};
use crate::numerics::{Init, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub combiner_blocks: usize,
    pub predictor_blocks: usize,
    pub ltae_heads: usize,
    pub ltae_key_dim: usize,
    /// Sub-patch size overrides per modality, in pixels.
    pub delta: BTreeMap<String, usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            heads: 4,
            encoder_blocks: 3,
            combiner_blocks: 3,
            predictor_blocks: 3,
            ltae_heads: 4,
            ltae_key_dim: 8,
            delta: BTreeMap::new(),
        }
    }
}

impl ModelConfig {
    pub fn with_width(embed_dim: usize) -> Self {
        ModelConfig { embed_dim, ..Default::default() }
    }

    /// Single-block predictor matching the published parameter count.
    pub fn single_block_predictor(mut self) -> Self {
        self.predictor_blocks = 1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.embed_dim;
        if e == 0 || e % 2 != 0 {
            return Err(Error::Config(format!("embed_dim must be even and positive, got {e}")));
        }
        if self.heads == 0 || e % self.heads != 0 {
            return Err(Error::Config(format!("embed_dim {e} not divisible by {} attention heads", self.heads)));
        }
        if self.ltae_heads == 0 || e % self.ltae_heads != 0 {
            return Err(Error::Config(format!(
                "temporal encoder width {e} not divisible by {} heads",
                self.ltae_heads
            )));
        }
        if self.ltae_key_dim == 0 || self.encoder_blocks == 0 || self.combiner_blocks == 0 || self.predictor_blocks == 0 {
            return Err(Error::Config("block counts and key width must be positive".into()));
        }
        if self.delta.values().any(|&d| d == 0) {
            return Err(Error::Config("sub-patch overrides must be positive".into()));
        }
        Ok(())
    }

    /// Applies the sub-patch overrides to a modality spec.
    pub fn apply_delta(&self, m: &ModalitySpec) -> ModalitySpec {
        let mut m = m.clone();
        if let Some(&d) = self.delta.get(&m.name) {
            m.delta = d;
        }
        m
    }
}

/// Shape of one modality projector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorShape {
    pub channels: usize,
    pub temporal: bool,
    /// Largest sub-patch side the projector accepts.
    pub delta: usize,
}

/// Projector shapes merged over every modality the model must handle.
pub fn projector_shapes<'a>(
    cfg: &ModelConfig,
    modalities: impl IntoIterator<Item = &'a ModalitySpec>,
) -> Result<BTreeMap<String, ProjectorShape>> {
    let mut out: BTreeMap<String, ProjectorShape> = BTreeMap::new();
    for m in modalities {
        let m = cfg.apply_delta(m);
        let delta = if m.is_context() { 1 } else { m.delta };
        let shape = ProjectorShape { channels: m.channels, temporal: m.is_temporal(), delta };
        match out.get_mut(&m.name) {
            None => {
                out.insert(m.name.clone(), shape);
            }
            Some(s) if s.channels == shape.channels => {
                s.temporal |= shape.temporal;
                s.delta = s.delta.max(shape.delta);
            }
            Some(s) => {
                return Err(Error::Config(format!(
                    "modality `{}` declared with {} and {} channels",
                    m.name, s.channels, shape.channels
                )))
            }
        }
    }
    Ok(out)
}

pub const PAD_VALUE: &str = "encoder/pad_value";
pub const MASK_TOKEN: &str = "ssl/tokens/mask";
pub const DROP_TOKEN: &str = "ssl/tokens/drop";

/// Whether a parameter belongs to the part of the model shared with the teacher.
pub fn is_backbone(name: &str) -> bool {
    name.starts_with("encoder/") || name.starts_with("combiner/")
}

/// Builds the full student tree: encoder, combiner, predictor and the
/// mask/drop tokens.
pub fn init_model(
    cfg: &ModelConfig,
    projectors: &BTreeMap<String, ProjectorShape>,
    rng: &mut impl Rng,
) -> Result<ParamStore> {
    cfg.validate()?;
    let e = cfg.embed_dim;
    let mut store = ParamStore::new();
    let mut init = Init { store: &mut store, rng };
    init.constant(PAD_VALUE, &[], 0.0)?;
    for (name, p) in projectors {
        let base = format!("encoder/proj/{name}");
        if p.temporal {
            init_linear(&mut init, &format!("{base}/ltae/in"), p.channels, e)?;
            init_linear(&mut init, &format!("{base}/ltae/key"), e, cfg.ltae_heads * cfg.ltae_key_dim)?;
            init.normal(&format!("{base}/ltae/query"), &[cfg.ltae_heads, cfg.ltae_key_dim], 1.0)?;
            init_mlp(&mut init, &format!("{base}/ltae/out"), e, 2 * e, e)?;
        } else {
            init_linear(&mut init, &format!("{base}/in"), p.channels, e)?;
        }
        init_mlp(&mut init, &format!("{base}/sub"), p.delta * p.delta * e, 2 * e, e)?;
    }
    init.normal("encoder/trans/cls", &[1, e], 0.02)?;
    for b in 0..cfg.encoder_blocks {
        init_self_block(&mut init, &format!("encoder/trans/block{b}"), e)?;
    }
    init_layer_norm(&mut init, "encoder/trans/norm", e)?;

    for b in 0..cfg.combiner_blocks {
        init_self_block(&mut init, &format!("combiner/self/block{b}"), e)?;
    }
    init.normal("combiner/query/seed", &[1, e], 0.02)?;
    init.normal("combiner/query/cls", &[1, e], 0.02)?;
    init_cross_block(&mut init, "combiner/cross/block0", e)?;
    init_layer_norm(&mut init, "combiner/cross/norm", e)?;

    for b in 0..cfg.predictor_blocks {
        init_self_block(&mut init, &format!("predictor/block{b}"), e)?;
    }
    init_layer_norm(&mut init, "predictor/norm", e)?;
    init.normal(MASK_TOKEN, &[1, e], 0.02)?;
    init.normal(DROP_TOKEN, &[1, e], 0.02)?;
    Ok(store)
}

/// [`init_model`] driven by a dedicated stream of `seed`'s generator, so
/// every consumer of the same seed starts from the same weights.
pub fn init_seeded(cfg: &ModelConfig, projectors: &BTreeMap<String, ProjectorShape>, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    init_model(cfg, projectors, &mut rng)
}

/// The teacher tree: a copy of the student's backbone parameters.
pub fn teacher_from(student: &ParamStore) -> ParamStore {
    student.subset(is_backbone)
}
