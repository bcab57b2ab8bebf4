use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{metrics_from_confusion, metrics_from_multilabel, ConfusionMatrix, Metrics, MultilabelCounts};
use super::{classify_from, head_forward, init_head, label_side, segment_from, HeadSpec};
use crate::combiner::combine_all;
use crate::config::{AdaptMode, OptimConfig, TaskConfig, TaskKind};
use crate::data::{Dataset, Labels, PixelLabels, TileSample};
use crate::encoder::encode_tile;
use crate::error::{Error, Result};
use crate::geometry::TileGeometry;
use crate::model::{init_seeded, is_backbone, projector_shapes, ModelConfig};
use crate::numerics::{Gradients, Graph, LrSchedule, LrScheduler, OptimizerState, ParamStore, Tensor, Var};

/// Builds the head description from the task section and the dataset.
pub fn resolve_head(task: &TaskConfig, model: &ModelConfig, ds: &Dataset) -> Result<HeadSpec> {
    let info = &ds.info;
    let patch_size = task.patch_size.unwrap_or_else(|| info.spec.finest_patch());
    info.patch_index(patch_size)?;
    let seg = matches!(task.task, TaskKind::Segment | TaskKind::Changedet);
    let num_classes = match task.task {
        TaskKind::Changedet => 2,
        _ => task
            .num_classes
            .or_else(|| ds.manifest.num_labels())
            .ok_or_else(|| Error::Head("number of classes unknown; set task.num_classes".into()))?,
    };
    let mut spec = HeadSpec {
        task: task.task,
        num_classes,
        multilabel: task.multilabel,
        patch_size,
        reference_modality: None,
        delta_eff: 1,
        hidden: task.mode != AdaptMode::Probe,
        naive: task.naive_segmentation,
    };
    if seg {
        let name = match &task.reference_modality {
            Some(m) => m.clone(),
            None => default_reference(task.task, ds)?,
        };
        if !info.spec.modalities.contains(&name) {
            return Err(Error::Head(format!("reference modality `{name}` not in dataset `{}`", info.spec.name)));
        }
        spec.reference_modality = Some(name);
        spec.delta_eff = spec.layout(model, info)?.delta_eff;
    }
    spec.validate()?;
    Ok(spec)
}

/// Finest non-context modality; the first time series for change detection.
fn default_reference(task: TaskKind, ds: &Dataset) -> Result<String> {
    let normal: Vec<_> = ds.info.normal_modalities().collect();
    let pick = if task == TaskKind::Changedet { normal.iter().find(|m| m.is_temporal()).or(normal.first()) } else { None };
    let pick = pick.or_else(|| normal.iter().min_by(|a, b| a.resolution.total_cmp(&b.resolution)));
    pick.map(|m| m.name.clone()).ok_or_else(|| Error::Head("dataset has no modality to segment from".into()))
}

/// Frozen-backbone outputs of one tile.
#[derive(Clone, Debug)]
pub enum TileFeatures {
    Tile(Tensor),
    Segment { sub: Tensor, fused: Tensor },
}

fn backbone_features(params: &ParamStore, model: &ModelConfig, spec: &HeadSpec, ds: &Dataset, tile: &TileSample) -> Result<TileFeatures> {
    let mut g = Graph::new(params, false);
    let map = encode_tile(&mut g, model, &ds.info, tile, spec.patch_size, None)?;
    if spec.is_segmentation() {
        let fused = combine_all(&mut g, model, &map, false)?;
        let enc = map.get(spec.reference_modality.as_deref().expect("validated"))?;
        Ok(TileFeatures::Segment { sub: g.value(enc.subpatches).clone(), fused: g.value(fused.embeddings).clone() })
    } else {
        let fused = combine_all(&mut g, model, &map, true)?;
        Ok(TileFeatures::Tile(g.value(fused.tile.expect("requested")).clone()))
    }
}

fn head_from_features(g: &mut Graph, model: &ModelConfig, spec: &HeadSpec, ds: &Dataset, f: &TileFeatures) -> Result<Var> {
    match f {
        TileFeatures::Tile(t) => {
            let t = g.constant(t.clone());
            classify_from(g, spec, t)
        }
        TileFeatures::Segment { sub, fused } => {
            let layout = spec.layout(model, &ds.info)?;
            let geom = TileGeometry::new(ds.info.spec.tile_size, spec.patch_size)?;
            let sub = g.constant(sub.clone());
            let fused = g.constant(fused.clone());
            segment_from(g, spec, &geom, &layout, label_side(&ds.info)?, sub, fused)
        }
    }
}

fn labels_of<'a>(tile: &'a TileSample, ds: &Dataset) -> Result<&'a Labels> {
    tile.labels.as_ref().ok_or_else(|| Error::Dataset { dataset: ds.name().into(), reason: format!("tile {} has no labels", tile.tile_id) })
}

/// Training loss of one tile given its logits.
fn loss_of(g: &mut Graph, spec: &HeadSpec, ds: &Dataset, tile: &TileSample, logits: Var) -> Result<Var> {
    let labels = labels_of(tile, ds)?;
    let n = spec.num_classes;
    if spec.is_segmentation() {
        let px = labels.pixels.as_ref().ok_or_else(|| Error::Head(format!("tile {} has no pixel labels", tile.tile_id)))?;
        let rows = g.shape(logits)[0];
        if px.classes.len() != rows {
            return Err(Error::Head(format!("{} label pixels vs {rows} predicted", px.classes.len())));
        }
        let mut onehot = vec![0.0; rows * n];
        for (i, &c) in px.classes.iter().enumerate() {
            let c = target_class(spec, c)?;
            onehot[i * n + c] = 1.0;
        }
        let lp = g.log_softmax(logits, 1)?;
        let y = g.constant(Tensor::new(vec![rows, n], onehot)?);
        let s = g.mul(lp, y)?;
        let s = g.sum_all(s)?;
        g.scale(s, -1.0 / rows as f64)
    } else if spec.multilabel {
        let mut y = vec![0.0; n];
        for &c in &labels.tile_classes {
            y[target_class(spec, c)?] = 1.0;
        }
        // BCE with logits: softplus(z) - y z.
        let y = g.constant(Tensor::from_vec(y));
        let sp = g.softplus(logits)?;
        let yz = g.mul(y, logits)?;
        let l = g.sub(sp, yz)?;
        g.mean_all(l)
    } else {
        let c = target_class(spec, labels.dominant)?;
        let lp = g.log_softmax(logits, 0)?;
        let pick = g.index_select(lp, &[c])?;
        let s = g.sum_all(pick)?;
        g.scale(s, -1.0)
    }
}

fn target_class(spec: &HeadSpec, c: u16) -> Result<usize> {
    let c = c as usize;
    if c >= spec.num_classes {
        return Err(Error::Head(format!("label {c} outside {} classes", spec.num_classes)));
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct AdaptOutput {
    /// Backbone and head parameters.
    pub params: ParamStore,
    pub head: HeadSpec,
    pub history: Vec<EpochRecord>,
    /// False when the backbone was never pretrained.
    pub backbone_pretrained: bool,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains a head (and, outside probing, the backbone) on `ds`.
///
/// `backbone` holds `encoder/*` and `combiner/*` weights; scratch mode, or a
/// missing backbone, starts from the seeded random initialisation.
pub fn adapt(
    ds: &Dataset,
    model: &ModelConfig,
    backbone: Option<&ParamStore>,
    task: &TaskConfig,
    optim: &OptimConfig,
    seed: u64,
) -> Result<AdaptOutput> {
    model.validate()?;
    optim.validate()?;
    if ds.tiles.is_empty() {
        return Err(Error::Dataset { dataset: ds.name().into(), reason: "no tiles".into() });
    }
    let spec = resolve_head(task, model, ds)?;
    let (mut params, pretrained) = match (task.mode, backbone) {
        (AdaptMode::Scratch, _) | (_, None) => {
            let shapes = projector_shapes(model, ds.info.modalities.iter())?;
            (init_seeded(model, &shapes, seed)?.subset(is_backbone), false)
        }
        (_, Some(b)) => (b.subset(is_backbone), true),
    };
    init_head(&mut params, &spec, model.embed_dim, &mut rng_for(seed, u64::MAX - 1))?;
    if task.mode == AdaptMode::Probe {
        params.set_trainable(|n| n.starts_with("head/"));
    } else {
        params.set_trainable(|_| true);
    }

    let frozen = task.mode == AdaptMode::Probe;
    let cache: Option<Vec<TileFeatures>> = if frozen {
        Some(ds.tiles.par_iter().map(|t| backbone_features(&params, model, &spec, ds, t)).collect::<Result<_>>()?)
    } else {
        None
    };

    let n = ds.tiles.len();
    let batch = task.batch_size.min(n);
    let per_epoch = n.div_ceil(batch);
    let total = task.epochs * per_epoch;
    let lr0 = task.lr.unwrap_or(optim.lr);
    let seg = spec.is_segmentation();
    let schedule = if seg { LrSchedule::plateau() } else { LrSchedule::warmup_cosine(total) };
    let mut scheduler = LrScheduler::new(schedule, lr0)?;
    let mut opt = OptimizerState::new(optim.adamw());
    let mut history = Vec::with_capacity(task.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..task.epochs {
        order.shuffle(&mut rng_for(seed, epoch as u64));
        let mut epoch_loss = 0.0;
        let lr_epoch = scheduler.current();
        for chunk in order.chunks(batch) {
            let run = |i: &usize| -> Result<(Gradients, f64)> {
                let mut g = Graph::new(&params, true);
                let logits = match &cache {
                    Some(c) => head_from_features(&mut g, model, &spec, ds, &c[*i])?,
                    None => head_forward(&mut g, model, &spec, &ds.info, &ds.tiles[*i])?,
                };
                let loss = loss_of(&mut g, &spec, ds, &ds.tiles[*i], logits)?;
                let v = g.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("adaptation loss at epoch {epoch}")));
                }
                Ok((g.backward(loss)?, v))
            };
            let results: Vec<Result<(Gradients, f64)>> = chunk.par_iter().map(run).collect();
            params.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            for r in results {
                let (grads, v) = r?;
                params.accumulate(&grads, scale);
                epoch_loss += v / n as f64;
            }
            let lr = if seg { lr_epoch } else { scheduler.lr(step, None)? };
            opt.adamw_step(&mut params, lr)?;
            step += 1;
        }
        let lr = if seg { lr_epoch } else { scheduler.lr(step, None)? };
        if seg {
            scheduler.lr(epoch, Some(epoch_loss))?;
        }
        history.push(EpochRecord { epoch, loss: epoch_loss, lr });
    }
    params.set_trainable(|_| true);
    Ok(AdaptOutput { params, head: spec, history, backbone_pretrained: pretrained })
}

/// Predicted labels of one tile, in the label block's layout.
pub fn predict_tile(params: &ParamStore, model: &ModelConfig, spec: &HeadSpec, ds: &Dataset, tile: &TileSample) -> Result<Labels> {
    let mut g = Graph::new(params, false);
    let logits = head_forward(&mut g, model, spec, &ds.info, tile)?;
    let v = g.value(logits);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("logits of tile {}", tile.tile_id)));
    }
    let n = spec.num_classes;
    let argmax = |row: &[f64]| (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).expect("classes") as u16;
    if spec.is_segmentation() {
        let classes: Vec<u16> = v.data().chunks_exact(n).map(argmax).collect();
        let side = label_side(&ds.info)?;
        let mut counts = vec![0usize; n];
        classes.iter().for_each(|&c| counts[c as usize] += 1);
        let dominant = (0..n).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).expect("classes") as u16;
        let mut present: Vec<u16> = (0..n as u16).filter(|&k| counts[k as usize] > 0).collect();
        present.sort_unstable();
        let pixels = PixelLabels { resolution: ds.info.spec.label_resolution(), side, classes };
        Ok(Labels { tile_classes: present, dominant, pixels: Some(pixels) })
    } else {
        let z = v.data();
        let dominant = argmax(z);
        let tile_classes = if spec.multilabel { (0..n as u16).filter(|&k| z[k as usize] > 0.0).collect() } else { vec![dominant] };
        Ok(Labels { tile_classes, dominant, pixels: None })
    }
}

/// Metrics and per-tile predictions on a labelled dataset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<Labels>,
}

/// Scores predictions against the dataset's labels.
pub fn score(spec: &HeadSpec, ds: &Dataset, predictions: &[Labels]) -> Result<Metrics> {
    if predictions.len() != ds.tiles.len() {
        return Err(Error::Metrics(format!("{} predictions for {} tiles", predictions.len(), ds.tiles.len())));
    }
    let n = spec.num_classes;
    if spec.multilabel {
        let mut c = MultilabelCounts::new(n);
        for (tile, pred) in ds.tiles.iter().zip(predictions) {
            let truth = labels_of(tile, ds)?;
            let hot = |l: &[u16]| (0..n as u16).map(|k| l.contains(&k)).collect::<Vec<bool>>();
            c.add(&hot(&truth.tile_classes), &hot(&pred.tile_classes))?;
        }
        return metrics_from_multilabel(&c);
    }
    let mut cm = ConfusionMatrix::new(n);
    for (tile, pred) in ds.tiles.iter().zip(predictions) {
        let truth = labels_of(tile, ds)?;
        if spec.is_segmentation() {
            let (t, p) = match (&truth.pixels, &pred.pixels) {
                (Some(t), Some(p)) if t.classes.len() == p.classes.len() => (t, p),
                _ => return Err(Error::Metrics(format!("pixel labels of tile {} do not match", tile.tile_id))),
            };
            for (&a, &b) in t.classes.iter().zip(&p.classes) {
                cm.add(a as usize, b as usize)?;
            }
        } else {
            cm.add(truth.dominant as usize, pred.dominant as usize)?;
        }
    }
    metrics_from_confusion(&cm)
}

pub fn evaluate(params: &ParamStore, model: &ModelConfig, spec: &HeadSpec, ds: &Dataset) -> Result<Evaluation> {
    let predictions: Vec<Labels> = ds.tiles.par_iter().map(|t| predict_tile(params, model, spec, ds, t)).collect::<Result<_>>()?;
    let metrics = score(spec, ds, &predictions)?;
    Ok(Evaluation { metrics, predictions })
}
