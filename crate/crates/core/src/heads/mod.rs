//! Downstream heads on the frozen or fine-tuned backbone: tile
//! classification from the combiner's class output and sub-patch
//! segmentation from the reference modality's projector outputs.

pub mod adapt;
pub mod metrics;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adapt::{adapt, evaluate, predict_tile, resolve_head, score, AdaptOutput, EpochRecord, Evaluation, TileFeatures};
pub use metrics::{metrics, metrics_from_confusion, metrics_from_multilabel, ConfusionMatrix, Metrics, MultilabelCounts};

pub use crate::config::{AdaptMode, TaskKind};
use crate::combiner::combine_all;
use crate::data::{TileSample, ValidatedDataset};
use crate::encoder::encode_tile;
use crate::error::{Error, Result};
use crate::geometry::{exact_ratio, subpatch_layout, SubPatchLayout, TileGeometry};
use crate::model::ModelConfig;
use crate::nn::{init_linear, init_mlp, linear, mlp};
use crate::numerics::{Graph, Init, ParamStore, Tensor, Var};

pub const CLS_HEAD: &str = "head/cls";
pub const SEG_HEAD: &str = "head/seg";

/// Resolved head description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task: TaskKind,
    pub num_classes: usize,
    pub multilabel: bool,
    pub patch_size: f64,
    /// Segmentation only.
    pub reference_modality: Option<String>,
    /// Segmentation only: sub-patch side of the reference modality.
    pub delta_eff: usize,
    /// One hidden layer instead of a linear map.
    pub hidden: bool,
    /// Patch embeddings only; sub-patch features replaced by zeros.
    pub naive: bool,
}

impl HeadSpec {
    pub fn is_segmentation(&self) -> bool {
        matches!(self.task, TaskKind::Segment | TaskKind::Changedet)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Head(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.is_segmentation() && (self.reference_modality.is_none() || self.multilabel) {
            return Err(Error::Head("segmentation needs a reference modality and a single label per pixel".into()));
        }
        if self.task == TaskKind::Changedet && self.num_classes != 2 {
            return Err(Error::Head(format!("change detection has 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }

    /// Sub-patch layout of the reference modality.
    pub fn layout(&self, model: &ModelConfig, ds: &ValidatedDataset) -> Result<SubPatchLayout> {
        let name = self.reference_modality.as_deref().ok_or_else(|| Error::Head("no reference modality".into()))?;
        let m = model.apply_delta(ds.modality(name)?);
        if m.is_context() {
            return Err(Error::Head(format!("reference modality `{name}` is a context observation")));
        }
        subpatch_layout(self.patch_size, m.resolution, m.delta)
    }
}

/// Registers the head parameters for a backbone of width `width`.
pub fn init_head(store: &mut ParamStore, spec: &HeadSpec, width: usize, rng: &mut impl Rng) -> Result<()> {
    spec.validate()?;
    let mut init = Init { store, rng };
    if spec.is_segmentation() {
        let out = spec.delta_eff * spec.delta_eff * spec.num_classes;
        if spec.hidden {
            init_mlp(&mut init, SEG_HEAD, 2 * width, 2 * width, out)
        } else {
            init_linear(&mut init, SEG_HEAD, 2 * width, out)
        }
    } else if spec.hidden {
        init_mlp(&mut init, CLS_HEAD, width, 2 * width, spec.num_classes)
    } else {
        init_linear(&mut init, CLS_HEAD, width, spec.num_classes)
    }
}

fn apply_head(g: &mut Graph, name: &str, hidden: bool, x: Var) -> Result<Var> {
    if hidden {
        mlp(g, name, x)
    } else {
        linear(g, name, x)
    }
}

/// Tile logits `[N]` from the tile embedding `[1, E]`.
pub fn classify_from(g: &mut Graph, spec: &HeadSpec, tile: Var) -> Result<Var> {
    let y = apply_head(g, CLS_HEAD, spec.hidden, tile)?;
    let n = g.shape(y)[1];
    if n != spec.num_classes {
        return Err(Error::Head(format!("head emits {n} logits, expected {}", spec.num_classes)));
    }
    g.reshape(y, &[n])
}

/// Bilinear resampling weights from a `src × src` grid to a `dst × dst`
/// grid covering the same extent, with pixel centers aligned. Returns the
/// four source indices and weights of every destination pixel.
pub fn bilinear_plan(src: usize, dst: usize) -> [(Vec<usize>, Vec<f64>); 4] {
    let scale = src as f64 / dst as f64;
    let axis: Vec<(usize, usize, f64)> = (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect();
    let mut out: [(Vec<usize>, Vec<f64>); 4] = Default::default();
    for &(y0, y1, wy) in &axis {
        for &(x0, x1, wx) in &axis {
            let corners = [(y0, x0, (1.0 - wy) * (1.0 - wx)), (y0, x1, (1.0 - wy) * wx), (y1, x0, wy * (1.0 - wx)), (y1, x1, wy * wx)];
            for (slot, (y, x, w)) in out.iter_mut().zip(corners) {
                slot.0.push(y * src + x);
                slot.1.push(w);
            }
        }
    }
    out
}

/// Resamples row-major pixel logits `[src², N]` to `[dst², N]`.
pub fn resample(g: &mut Graph, x: Var, src: usize, dst: usize) -> Result<Var> {
    if src == dst {
        return Ok(x);
    }
    let mut acc: Option<Var> = None;
    for (idx, w) in bilinear_plan(src, dst) {
        let rows = g.index_select(x, &idx)?;
        let n = w.len();
        let w = g.constant(Tensor::new(vec![n, 1], w)?);
        let term = g.mul(rows, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("four corners"))
}

/// Row of the flattened `[N_patch · n_sub · δ², C]` logits holding pixel
/// `(x, y)` of the reference grid, for each pixel in row-major order.
pub fn scatter_index(geom: &TileGeometry, layout: &SubPatchLayout) -> Vec<usize> {
    let ppp = layout.pixels_per_patch;
    let de = layout.delta_eff;
    let side = geom.per_axis * ppp;
    let nsub = layout.count();
    let mut idx = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let p = geom.index(x / ppp, y / ppp);
            let (lx, ly) = (x % ppp, y % ppp);
            let s = (ly / de) * layout.per_axis + lx / de;
            let k = (ly % de) * de + lx % de;
            idx.push((p * nsub + s) * de * de + k);
        }
    }
    idx
}

/// Pixel logits `[L², N]` on the label grid from sub-patch features
/// `[N_patch, n_sub, E]` and patch embeddings `[N_patch, E]`.
pub fn segment_from(
    g: &mut Graph,
    spec: &HeadSpec,
    geom: &TileGeometry,
    layout: &SubPatchLayout,
    label_side: usize,
    sub: Var,
    fused: Var,
) -> Result<Var> {
    let s = g.shape(sub).to_vec();
    let (np, nsub, e) = (s[0], s[1], s[2]);
    if np != geom.total() || nsub != layout.count() || g.shape(fused) != [np, e] {
        return Err(Error::shape("segment", &[&s, g.shape(fused)]));
    }
    if layout.delta_eff != spec.delta_eff {
        return Err(Error::Head(format!("head built for sub-patch side {}, layout has {}", spec.delta_eff, layout.delta_eff)));
    }
    let rep: Vec<usize> = (0..np).flat_map(|p| std::iter::repeat_n(p, nsub)).collect();
    let f = g.index_select(fused, &rep)?;
    let f = g.reshape(f, &[np, nsub, e])?;
    let sub = if spec.naive { g.constant(Tensor::zeros(&[np, nsub, e])) } else { sub };
    let x = g.concat(&[sub, f], 2)?;
    let y = apply_head(g, SEG_HEAD, spec.hidden, x)?;
    let n = spec.num_classes;
    let de = layout.delta_eff;
    let y = g.reshape(y, &[np * nsub * de * de, n])?;
    let pix = g.index_select(y, &scatter_index(geom, layout))?;
    let side = geom.per_axis * layout.pixels_per_patch;
    resample(g, pix, side, label_side)
}

/// Label-grid side of a dataset.
pub fn label_side(ds: &ValidatedDataset) -> Result<usize> {
    exact_ratio(ds.spec.tile_size, ds.spec.label_resolution())
        .ok_or_else(|| Error::Head(format!("label resolution {} does not tile {} m", ds.spec.label_resolution(), ds.spec.tile_size)))
}

/// Backbone forward for one tile followed by the head. Classification
/// returns `[N]`, segmentation `[L², N]`.
pub fn head_forward(
    g: &mut Graph,
    model: &ModelConfig,
    spec: &HeadSpec,
    ds: &ValidatedDataset,
    tile: &TileSample,
) -> Result<Var> {
    let map = encode_tile(g, model, ds, tile, spec.patch_size, None)?;
    if spec.is_segmentation() {
        let fused = combine_all(g, model, &map, false)?;
        let name = spec.reference_modality.as_deref().expect("validated");
        let enc = map.get(name)?;
        let layout = enc.layout;
        segment_from(g, spec, &map.geometry, &layout, label_side(ds)?, enc.subpatches, fused.embeddings)
    } else {
        let fused = combine_all(g, model, &map, true)?;
        classify_from(g, spec, fused.tile.expect("requested"))
    }
}
