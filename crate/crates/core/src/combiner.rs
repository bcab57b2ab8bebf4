//! Modality combiner: fuses per-(patch, modality) tokens into one vector per
//! patch through self-attention followed by cross-attention from learned
//! per-patch queries.

use std::collections::BTreeSet;

use crate::encoder::EmbeddingMap;
use crate::error::{Error, Result};
use crate::geometry::{pos_encoding, PosEncodingSpec, TileGeometry};
use crate::model::ModelConfig;
use crate::nn::{cross_block, layer_norm, self_block};
use crate::numerics::{Graph, Tensor, Var};

/// One combiner input: row `row` of the `[n, E]` matrix `source`, standing
/// for modality `modality` of patch `patch`.
#[derive(Clone, Debug)]
pub struct TokenRef {
    pub patch: usize,
    pub modality: String,
    pub source: Var,
    pub row: usize,
}

/// Combiner output.
pub struct MultimodalEmbeddings {
    /// Patch indices in ascending order.
    pub patches: Vec<usize>,
    /// `f*_p` for each entry of `patches`, `[N, E]`.
    pub embeddings: Var,
    /// Tile-level class output `[1, E]` when requested.
    pub tile: Option<Var>,
}

impl MultimodalEmbeddings {
    pub fn row_of(&self, patch: usize) -> Option<usize> {
        self.patches.binary_search(&patch).ok()
    }
}

/// Patch positional encodings `[N, E]` (unit `P` meters) for `patches`.
pub fn patch_encodings(geom: &TileGeometry, width: usize, patches: &[usize]) -> Result<Tensor> {
    let spec = PosEncodingSpec::new(width, geom.patch_size)?;
    let mut data = Vec::with_capacity(patches.len() * width);
    for &p in patches {
        let (x, y) = geom.position(p);
        data.extend(pos_encoding(x, y, &spec));
    }
    Tensor::new(vec![patches.len(), width], data)
}

/// Stacks the referenced rows into one `[N, E]` matrix.
pub fn gather_rows(g: &mut Graph, refs: &[(Var, usize)]) -> Result<Var> {
    let mut sources: Vec<Var> = Vec::new();
    let mut offsets: Vec<usize> = Vec::new();
    let mut total = 0;
    let mut idx = Vec::with_capacity(refs.len());
    for &(src, row) in refs {
        let k = match sources.iter().position(|&s| s == src) {
            Some(k) => k,
            None => {
                sources.push(src);
                offsets.push(total);
                total += g.shape(src)[0];
                sources.len() - 1
            }
        };
        if row >= g.shape(src)[0] {
            return Err(Error::CombinerInput(format!("row {row} out of range for a {:?} source", g.shape(src))));
        }
        idx.push(offsets[k] + row);
    }
    let all = if sources.len() == 1 { sources[0] } else { g.concat(&sources, 0)? };
    g.index_select(all, &idx)
}

/// Fuses `tokens` (plus context tokens `[1, E]` each, which carry no
/// positional encoding) into one embedding per patch present in `tokens`.
pub fn combine(
    g: &mut Graph,
    cfg: &ModelConfig,
    geom: &TileGeometry,
    tokens: &[TokenRef],
    context: &[Var],
    want_tile_embedding: bool,
) -> Result<MultimodalEmbeddings> {
    if tokens.is_empty() {
        return Err(Error::CombinerInput("no tokens".into()));
    }
    let e = cfg.embed_dim;
    let mut seen = BTreeSet::new();
    for t in tokens {
        if !geom.contains(t.patch) {
            return Err(Error::CombinerInput(format!("patch {} outside a grid of {}", t.patch, geom.total())));
        }
        if !seen.insert((t.patch, t.modality.as_str())) {
            return Err(Error::CombinerInput(format!("duplicate token for patch {} modality `{}`", t.patch, t.modality)));
        }
    }
    let refs: Vec<(Var, usize)> = tokens.iter().map(|t| (t.source, t.row)).collect();
    let x = gather_rows(g, &refs)?;
    let token_patches: Vec<usize> = tokens.iter().map(|t| t.patch).collect();
    let pe = g.constant(patch_encodings(geom, e, &token_patches)?);
    let mut x = g.add(x, pe)?;
    if !context.is_empty() {
        let mut parts = vec![x];
        parts.extend_from_slice(context);
        x = g.concat(&parts, 0)?;
    }
    let l = g.shape(x)[0];
    let mut h = g.reshape(x, &[1, l, e])?;
    for i in 0..cfg.combiner_blocks {
        h = self_block(g, &format!("combiner/self/block{i}"), h, cfg.heads)?;
    }

    let patches: Vec<usize> = token_patches.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let n = patches.len();
    let seed = g.param("combiner/query/seed")?;
    let q = g.index_select(seed, &vec![0; n])?;
    let qpe = g.constant(patch_encodings(geom, e, &patches)?);
    let mut q = g.add(q, qpe)?;
    if want_tile_embedding {
        let cls = g.param("combiner/query/cls")?;
        q = g.concat(&[q, cls], 0)?;
    }
    let nq = g.shape(q)[0];
    let q = g.reshape(q, &[1, nq, e])?;
    let out = cross_block(g, "combiner/cross/block0", q, h, cfg.heads)?;
    let out = layer_norm(g, "combiner/cross/norm", out)?;
    let out = g.reshape(out, &[nq, e])?;
    let (embeddings, tile) = if want_tile_embedding {
        (g.slice(out, 0, 0, n)?, Some(g.slice(out, 0, n, n + 1)?))
    } else {
        (out, None)
    };
    Ok(MultimodalEmbeddings { patches, embeddings, tile })
}

/// Every (patch, modality) token of an embedding map.
pub fn all_tokens(map: &EmbeddingMap) -> Vec<TokenRef> {
    let mut out = Vec::with_capacity(map.len());
    for p in 0..map.geometry.total() {
        for (name, enc) in &map.modalities {
            out.push(TokenRef { patch: p, modality: name.clone(), source: enc.patches, row: p });
        }
    }
    out
}

/// Context-token embeddings of a tile, in dataset order.
pub fn attach_context(map: &EmbeddingMap) -> Vec<Var> {
    map.context.iter().map(|(_, v)| *v).collect()
}

/// Full-input forward: every token, every patch.
pub fn combine_all(g: &mut Graph, cfg: &ModelConfig, map: &EmbeddingMap, want_tile_embedding: bool) -> Result<MultimodalEmbeddings> {
    let tokens = all_tokens(map);
    let context = attach_context(map);
    combine(g, cfg, &map.geometry, &tokens, &context, want_tile_embedding)
}
