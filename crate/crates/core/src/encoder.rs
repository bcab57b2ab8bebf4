//! Scale-adaptive patch encoder: per-modality projectors followed by a
//! spatial transformer shared by every modality.
//!
//! A modality's view of a patch is cut into `δ_eff × δ_eff` pixel
//! sub-patches. Each pixel series is collapsed to width `E` (temporal
//! attention for time series, a linear map for single images), each
//! sub-patch is flattened and mapped to `E` by an MLP, sub-patch positional
//! encodings with unit `R·δ_eff` meters are added, and the transformer's
//! class-token output is the patch embedding.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::data::{ModalityData, ModalitySpec, TileSample, ValidatedDataset};
use crate::error::{Error, Result};
use crate::geometry::{grid_encoding, PosEncodingSpec, SubPatchLayout, TileGeometry};
use crate::model::{ModelConfig, PAD_VALUE};
use crate::nn::{layer_norm, linear, mlp, mlp_rows, self_block};
use crate::numerics::{Graph, Tensor, Var};

/// Sinusoidal day-of-year encoding, `[T, E]`. Channel pair `j` oscillates
/// `j + 1` times per year.
pub fn date_encoding(days: &[f64], width: usize) -> Tensor {
    let mut data = Vec::with_capacity(days.len() * width);
    for &d in days {
        for j in 0..width {
            let freq = (j / 2 + 1) as f64;
            let phase = if j % 2 == 1 { PI / 2.0 } else { 0.0 };
            data.push((2.0 * PI * freq * d / 366.0 + phase).sin());
        }
    }
    Tensor::new(vec![days.len(), width], data).expect("sized above")
}

/// Output of the temporal encoder on `N` series.
pub struct LtaeOutput {
    /// `[N, E]`.
    pub out: Var,
    /// Attention weights `[N, heads, T]`.
    pub weights: Var,
}

/// Lightweight temporal attention over `x [N, T, C]` observed on `days`.
///
/// Inputs are projected to width `E` and shifted by the date encoding. Each
/// head owns a learned master query scored against keys derived from these
/// vectors, and pools its own group of `E / heads` channels. The pooled
/// groups are concatenated and passed through the output MLP.
pub fn ltae(g: &mut Graph, base: &str, cfg: &ModelConfig, x: Var, days: &[f64]) -> Result<LtaeOutput> {
    let s = g.shape(x).to_vec();
    let (n, t) = (s[0], s[1]);
    let (e, heads, dk) = (cfg.embed_dim, cfg.ltae_heads, cfg.ltae_key_dim);
    if e % heads != 0 {
        return Err(Error::Config(format!("temporal encoder width {e} not divisible by {heads} heads")));
    }
    if days.len() != t {
        return Err(Error::shape("ltae", &[&s, &[days.len()]]));
    }
    let h = linear(g, &format!("{base}/in"), x)?;
    let pe = g.constant(date_encoding(days, e));
    let h = g.add(h, pe)?;
    let k = linear(g, &format!("{base}/key"), h)?;
    let k = g.reshape(k, &[n, t, heads, dk])?;
    let q = g.param(&format!("{base}/query"))?;
    let scores = g.mul(k, q)?;
    let scores = g.sum(scores, 3)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let scores = g.permute(scores, &[0, 2, 1])?;
    let weights = g.softmax(scores, 2)?;
    let a = g.reshape(weights, &[n, heads, 1, t])?;
    let v = g.reshape(h, &[n, t, heads, e / heads])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;
    let pooled = g.matmul(a, v)?;
    let pooled = g.reshape(pooled, &[n, e])?;
    let out = mlp(g, &format!("{base}/out"), pooled)?;
    Ok(LtaeOutput { out, weights })
}

/// Per-pixel collapse of `x [N, T, C_expected]` to `[N, E]`.
pub fn collapse_pixels(g: &mut Graph, cfg: &ModelConfig, modality: &str, x: Var, days: &[f64]) -> Result<Var> {
    let base = format!("encoder/proj/{modality}");
    if g.store().contains(&format!("{base}/ltae/in/w")) {
        return Ok(ltae(g, &format!("{base}/ltae"), cfg, x, days)?.out);
    }
    let s = g.shape(x).to_vec();
    if s[1] != 1 {
        return Err(Error::Config(format!("modality `{modality}` has a single-date projector but {} dates", s[1])));
    }
    let y = linear(g, &format!("{base}/in"), x)?;
    g.reshape(y, &[s[0], cfg.embed_dim])
}

/// Pixel series of every patch, sub-patch and pixel in that nesting order
/// (each row-major), as `[N, T, C]`.
pub fn gather_subpatches(data: &ModalityData, geom: &TileGeometry, layout: &SubPatchLayout) -> Result<Tensor> {
    let ppp = layout.pixels_per_patch;
    if data.side() != geom.per_axis * ppp {
        return Err(Error::Layout(format!(
            "array side {} px does not match {} patches of {ppp} px",
            data.side(),
            geom.per_axis
        )));
    }
    let (t, c) = (data.timesteps(), data.channels());
    let de = layout.delta_eff;
    let mut out = Vec::with_capacity(data.values.len());
    for p in 0..geom.total() {
        let (px, py) = geom.position(p);
        for s in 0..layout.count() {
            let (sx, sy) = (s % layout.per_axis, s / layout.per_axis);
            for k in 0..de * de {
                let x = px * ppp + sx * de + k % de;
                let y = py * ppp + sy * de + k / de;
                out.extend(data.pixel(x, y).iter().map(|&v| v as f64));
            }
        }
    }
    let n = out.len() / (t * c);
    Tensor::new(vec![n, t, c], out)
}

/// Raw channels mapped to the expected channel set, padding missing ones
/// with the learned scalar.
fn expand_channels(g: &mut Graph, spec: &ModalitySpec, present: &[usize], x: Var) -> Result<Var> {
    if present.len() == spec.channels && present.iter().enumerate().all(|(i, &c)| i == c) {
        return Ok(x);
    }
    let pad = g.param(PAD_VALUE)?;
    g.pad_channels(x, pad, present, spec.channels)
}

/// Embeddings of one modality over every patch of a tile.
pub struct ModalityEncoding {
    /// `f_p^m` for every patch, `[N_patches, E]`.
    pub patches: Var,
    /// Projector outputs per sub-patch, `[N_patches, n_sub, E]`.
    pub subpatches: Var,
    pub layout: SubPatchLayout,
}

/// Class-token transformer over `tokens [B, L, E]`; returns `[B, E]`.
pub fn spatial_transformer(g: &mut Graph, cfg: &ModelConfig, tokens: Var) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let (b, e) = (s[0], s[2]);
    let cls = g.param("encoder/trans/cls")?;
    let cls = g.index_select(cls, &vec![0; b])?;
    let cls = g.reshape(cls, &[b, 1, e])?;
    let mut x = g.concat(&[cls, tokens], 1)?;
    for i in 0..cfg.encoder_blocks {
        x = self_block(g, &format!("encoder/trans/block{i}"), x, cfg.heads)?;
    }
    let x = layer_norm(g, "encoder/trans/norm", x)?;
    let first = g.slice(x, 1, 0, 1)?;
    g.reshape(first, &[b, e])
}

/// Encodes every patch of one (non-context) modality.
pub fn encode_modality(
    g: &mut Graph,
    cfg: &ModelConfig,
    spec: &ModalitySpec,
    present: &[usize],
    data: &ModalityData,
    geom: &TileGeometry,
    layout: &SubPatchLayout,
) -> Result<ModalityEncoding> {
    let e = cfg.embed_dim;
    let raw = gather_subpatches(data, geom, layout)?;
    let x = g.constant(raw);
    let x = expand_channels(g, spec, present, x)?;
    let px = collapse_pixels(g, cfg, &spec.name, x, &data.days())?;
    let (np, nsub, de) = (geom.total(), layout.count(), layout.delta_eff);
    let flat = g.reshape(px, &[np * nsub, de * de * e])?;
    let sub = mlp_rows(g, &format!("encoder/proj/{}/sub", spec.name), flat, de * de * e)?;
    let subpatches = g.reshape(sub, &[np, nsub, e])?;
    let pe_spec = PosEncodingSpec::new(e, layout.subpatch_meters())?;
    let pe = Tensor::new(vec![nsub, e], grid_encoding(layout.per_axis, &pe_spec))?;
    let pe = g.constant(pe);
    let tokens = g.add(subpatches, pe)?;
    let patches = spatial_transformer(g, cfg, tokens)?;
    Ok(ModalityEncoding { patches, subpatches, layout: *layout })
}

/// One embedding `[1, E]` for a context observation: its pixels are averaged
/// into a single series, projected, and passed through the transformer as
/// a single sub-patch without positional encoding.
pub fn encode_context(g: &mut Graph, cfg: &ModelConfig, spec: &ModalitySpec, present: &[usize], data: &ModalityData) -> Result<Var> {
    let e = cfg.embed_dim;
    let (t, c) = (data.timesteps(), data.channels());
    let npx = data.shape[0] * data.shape[1];
    let mut mean = vec![0.0; t * c];
    for px in data.values.chunks_exact(t * c) {
        mean.iter_mut().zip(px).for_each(|(m, &v)| *m += v as f64 / npx as f64);
    }
    let x = g.constant(Tensor::new(vec![1, t, c], mean)?);
    let x = expand_channels(g, spec, present, x)?;
    let px = collapse_pixels(g, cfg, &spec.name, x, &data.days())?;
    let sub = mlp_rows(g, &format!("encoder/proj/{}/sub", spec.name), px, e)?;
    let tokens = g.reshape(sub, &[1, 1, e])?;
    spatial_transformer(g, cfg, tokens)
}

/// All unimodal embeddings of a tile.
pub struct EmbeddingMap {
    pub geometry: TileGeometry,
    /// Non-context modalities in dataset order.
    pub modalities: Vec<(String, ModalityEncoding)>,
    pub context: Vec<(String, Var)>,
}

impl EmbeddingMap {
    pub fn get(&self, modality: &str) -> Result<&ModalityEncoding> {
        self.modalities
            .iter()
            .find(|(n, _)| n == modality)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::UnknownModality(modality.to_string()))
    }

    pub fn len(&self) -> usize {
        self.modalities.len() * self.geometry.total()
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }
}

/// Encodes a tile at patch size `patch_size`. `keep_times` restricts time
/// series to the listed timestamp indices first.
pub fn encode_tile(
    g: &mut Graph,
    cfg: &ModelConfig,
    ds: &ValidatedDataset,
    tile: &TileSample,
    patch_size: f64,
    keep_times: Option<&BTreeMap<String, Vec<usize>>>,
) -> Result<EmbeddingMap> {
    let geometry = TileGeometry::new(ds.spec.tile_size, patch_size)?;
    ds.patch_index(patch_size)?;
    let mut modalities = Vec::new();
    let mut context = Vec::new();
    for spec in &ds.modalities {
        let spec = cfg.apply_delta(spec);
        let raw = tile.modality(&spec.name)?;
        let truncated;
        let data = match keep_times.and_then(|k| k.get(&spec.name)) {
            Some(keep) => {
                truncated = raw.select_times(keep);
                &truncated
            }
            None => raw,
        };
        let present = ds.stored_channels(&spec.name)?;
        if spec.is_context() {
            context.push((spec.name.clone(), encode_context(g, cfg, &spec, &present, data)?));
        } else {
            let layout = crate::geometry::subpatch_layout(patch_size, spec.resolution, spec.delta)?;
            modalities.push((spec.name.clone(), encode_modality(g, cfg, &spec, &present, data, &geometry, &layout)?));
        }
    }
    Ok(EmbeddingMap { geometry, modalities, context })
}
