use crate::combiner::{combine, combine_all, gather_rows, patch_encodings, TokenRef};
use crate::data::{TileSample, ValidatedDataset};
use crate::encoder::{encode_tile, EmbeddingMap};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, DROP_TOKEN, MASK_TOKEN};
use crate::nn::{layer_norm, self_block};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

use super::mask::MaskPlan;

/// Student outputs for one tile.
pub struct StudentOutput {
    pub map: EmbeddingMap,
    /// Unimodal embeddings `[N, E]` of every non-context modality, computed
    /// from the kept timestamps.
    pub unimodal: Vec<(String, Var)>,
    /// Predictor output `[N, E]` for every patch.
    pub predictions: Var,
}

/// Combiner tokens for the kept patches with masked tokens replaced by the
/// mask embedding.
pub fn student_tokens(g: &mut Graph, map: &EmbeddingMap, plan: &MaskPlan) -> Result<Vec<TokenRef>> {
    let mask = g.param(MASK_TOKEN)?;
    let mut tokens = Vec::new();
    for &p in &plan.kept {
        for (name, enc) in &map.modalities {
            let (source, row) = if plan.is_masked(p, name) { (mask, 0) } else { (enc.patches, p) };
            tokens.push(TokenRef { patch: p, modality: name.clone(), source, row });
        }
    }
    Ok(tokens)
}

/// Predictor over `[N, E]` inputs with patch positional encodings.
pub fn predictor(g: &mut Graph, cfg: &ModelConfig, geom: &crate::geometry::TileGeometry, x: Var) -> Result<Var> {
    let n = geom.total();
    let e = cfg.embed_dim;
    let all: Vec<usize> = (0..n).collect();
    let pe = g.constant(patch_encodings(geom, e, &all)?);
    let x = g.add(x, pe)?;
    let mut h = g.reshape(x, &[1, n, e])?;
    for i in 0..cfg.predictor_blocks {
        h = self_block(g, &format!("predictor/block{i}"), h, cfg.heads)?;
    }
    let h = layer_norm(g, "predictor/norm", h)?;
    g.reshape(h, &[n, e])
}

/// Student branch: every patch is encoded from the kept timestamps, the
/// combiner sees only kept patches (with masking), and the predictor fills
/// dropped patches starting from the drop embedding.
pub fn student_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    ds: &ValidatedDataset,
    tile: &TileSample,
    patch_size: f64,
    plan: &MaskPlan,
) -> Result<StudentOutput> {
    let map = encode_tile(g, cfg, ds, tile, patch_size, Some(&plan.kept_timestamps))?;
    let n = map.geometry.total();
    if plan.dropped.len() + plan.kept.len() != n || plan.kept.iter().chain(&plan.dropped).any(|&p| p >= n) {
        return Err(Error::Config(format!("mask plan does not match a grid of {n} patches")));
    }
    let tokens = student_tokens(g, &map, plan)?;
    let context: Vec<Var> = map.context.iter().map(|(_, v)| *v).collect();
    let fused = combine(g, cfg, &map.geometry, &tokens, &context, false)?;
    let drop = g.param(DROP_TOKEN)?;
    let refs: Vec<(Var, usize)> = (0..n)
        .map(|p| match fused.row_of(p) {
            Some(r) if !plan.is_dropped(p) => (fused.embeddings, r),
            _ => (drop, 0),
        })
        .collect();
    let x = gather_rows(g, &refs)?;
    let predictions = predictor(g, cfg, &map.geometry, x)?;
    let unimodal = map.modalities.iter().map(|(name, enc)| (name.clone(), enc.patches)).collect();
    Ok(StudentOutput { map, unimodal, predictions })
}

/// Teacher branch on the full input; returns `f*_p` for every patch,
/// `[N, E]`. Parameters are bound as constants.
pub fn teacher_forward(
    teacher: &ParamStore,
    cfg: &ModelConfig,
    ds: &ValidatedDataset,
    tile: &TileSample,
    patch_size: f64,
) -> Result<Tensor> {
    let mut g = Graph::new(teacher, false);
    let map = encode_tile(&mut g, cfg, ds, tile, patch_size, None)?;
    let fused = combine_all(&mut g, cfg, &map, false)?;
    Ok(g.value(fused.embeddings).clone())
}
