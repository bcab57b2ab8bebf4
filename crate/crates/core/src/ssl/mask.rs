use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TileGeometry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub rectangles: usize,
    /// Range of each rectangle's area as a fraction of the tile.
    pub area: (f64, f64),
    /// Range of width / height.
    pub aspect: (f64, f64),
    /// Redraws before rectangles start shrinking when every patch is hit.
    pub max_resamples: usize,
    pub modality_mask_rate: f64,
    /// Fraction of timestamps kept (rounded up).
    pub keep_timestamps: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            rectangles: 5,
            area: (0.15, 0.20),
            aspect: (0.75, 1.5),
            max_resamples: 20,
            modality_mask_rate: 0.5,
            keep_timestamps: 0.5,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rectangles > 0
            && 0.0 < self.area.0
            && self.area.0 <= self.area.1
            && self.area.1 <= 1.0
            && 0.0 < self.aspect.0
            && self.aspect.0 <= self.aspect.1
            && (0.0..=1.0).contains(&self.modality_mask_rate)
            && 0.0 < self.keep_timestamps
            && self.keep_timestamps <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid mask configuration {self:?}")))
        }
    }

    pub fn kept_count(&self, t: usize) -> usize {
        ((t as f64 * self.keep_timestamps).ceil() as usize).clamp(1, t)
    }
}

/// One pretraining step's randomness for one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Patches removed from the student, sorted.
    pub dropped: Vec<usize>,
    /// The remaining patches, sorted.
    pub kept: Vec<usize>,
    /// `(kept patch, modality)` tokens replaced by the mask embedding.
    pub masked: BTreeSet<(usize, String)>,
    /// Sorted timestamp indices kept per modality.
    pub kept_timestamps: BTreeMap<String, Vec<usize>>,
}

impl MaskPlan {
    pub fn is_dropped(&self, patch: usize) -> bool {
        self.dropped.binary_search(&patch).is_ok()
    }

    pub fn is_masked(&self, patch: usize, modality: &str) -> bool {
        self.masked.contains(&(patch, modality.to_string()))
    }

    /// Checks every plan invariant against the grid, modalities and lengths.
    pub fn check(&self, geom: &TileGeometry, modalities: &[String], timesteps: &BTreeMap<String, usize>, cfg: &MaskConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("mask plan invariant violated: {m}")));
        if self.dropped.is_empty() || self.kept.is_empty() {
            return fail("dropped and kept sets must both be non-empty".into());
        }
        let mut all: Vec<usize> = self.dropped.iter().chain(&self.kept).copied().collect();
        all.sort_unstable();
        if all != (0..geom.total()).collect::<Vec<_>>() {
            return fail("dropped and kept do not partition the grid".into());
        }
        for &p in &self.kept {
            if modalities.iter().all(|m| self.is_masked(p, m)) {
                return fail(format!("every modality of patch {p} is masked"));
            }
        }
        if self.masked.iter().any(|(p, _)| self.is_dropped(*p)) {
            return fail("masked token on a dropped patch".into());
        }
        for (m, &t) in timesteps {
            let keep = self.kept_timestamps.get(m).map(Vec::len);
            if keep != Some(cfg.kept_count(t)) {
                return fail(format!("modality `{m}` keeps {keep:?} of {t} timestamps"));
            }
        }
        Ok(())
    }
}

/// Axis-aligned rectangle in unit tile coordinates.
#[derive(Clone, Copy, Debug)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

fn draw_rect(cfg: &MaskConfig, scale: f64, rng: &mut impl Rng) -> Rect {
    let area = rng.random_range(cfg.area.0..=cfg.area.1) * scale;
    let aspect = rng.random_range(cfg.aspect.0.ln()..=cfg.aspect.1.ln()).exp();
    let w = (area * aspect).sqrt().min(1.0);
    let h = (area / aspect).sqrt().min(1.0);
    let x0 = rng.random_range(0.0..=1.0 - w);
    let y0 = rng.random_range(0.0..=1.0 - h);
    Rect { x0, y0, x1: x0 + w, y1: y0 + h }
}

fn hit_patches(geom: &TileGeometry, rects: &[Rect]) -> BTreeSet<usize> {
    let n = geom.per_axis as f64;
    let mut out = BTreeSet::new();
    for p in 0..geom.total() {
        let (px, py) = geom.position(p);
        let (a0, a1) = (px as f64 / n, (px + 1) as f64 / n);
        let (b0, b1) = (py as f64 / n, (py + 1) as f64 / n);
        if rects.iter().any(|r| r.x0 < a1 && r.x1 > a0 && r.y0 < b1 && r.y1 > b0) {
            out.insert(p);
        }
    }
    out
}

/// Union of patches hit by the configured rectangles, redrawn (and then
/// shrunk) until at least one patch survives.
pub fn rectangle_drop(geom: &TileGeometry, cfg: &MaskConfig, rng: &mut impl Rng) -> BTreeSet<usize> {
    let total = geom.total();
    let mut scale = 1.0;
    for attempt in 0.. {
        if attempt >= cfg.max_resamples {
            scale *= 0.5;
        }
        let rects: Vec<Rect> = (0..cfg.rectangles).map(|_| draw_rect(cfg, scale, rng)).collect();
        let hit = hit_patches(geom, &rects);
        if hit.len() < total {
            return hit;
        }
        if attempt >= cfg.max_resamples + 30 {
            let mut hit = hit;
            let spare = rng.random_range(0..total);
            hit.remove(&spare);
            return hit;
        }
    }
    unreachable!("loop returns")
}

/// Mean fraction of patches dropped by [`rectangle_drop`] on this grid,
/// estimated from a fixed-seed sample.
pub fn expected_drop_rate(geom: &TileGeometry, cfg: &MaskConfig) -> f64 {
    const DRAWS: usize = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ geom.per_axis as u64);
    let total: usize = (0..DRAWS).map(|_| rectangle_drop(geom, cfg, &mut rng).len()).sum();
    total as f64 / (DRAWS * geom.total()) as f64
}

/// Independent per-patch dropping at `rate`, repaired so both sets are non-empty.
pub fn random_drop(geom: &TileGeometry, rate: f64, rng: &mut impl Rng) -> BTreeSet<usize> {
    let total = geom.total();
    let mut hit: BTreeSet<usize> = (0..total).filter(|_| rng.random_bool(rate)).collect();
    if hit.is_empty() {
        hit.insert(rng.random_range(0..total));
    } else if hit.len() == total {
        hit.remove(&rng.random_range(0..total));
    }
    hit
}

/// How the dropped set is drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DropMode {
    Rectangles,
    /// Independent per-patch dropping at this rate.
    Random(f64),
}

/// Samples a mask plan. `modalities` are the non-context modalities and
/// `timesteps` the series length of every modality.
pub fn sample_mask_plan(
    geom: &TileGeometry,
    modalities: &[String],
    timesteps: &BTreeMap<String, usize>,
    cfg: &MaskConfig,
    mode: DropMode,
    rng: &mut impl Rng,
) -> Result<MaskPlan> {
    cfg.validate()?;
    if geom.total() < 2 {
        return Err(Error::Config("pretraining needs at least two patches per tile".into()));
    }
    if modalities.is_empty() {
        return Err(Error::Config("mask plan needs at least one modality".into()));
    }
    let dropped_set = match mode {
        DropMode::Rectangles => rectangle_drop(geom, cfg, rng),
        DropMode::Random(rate) => random_drop(geom, rate, rng),
    };
    let dropped: Vec<usize> = dropped_set.iter().copied().collect();
    let kept: Vec<usize> = (0..geom.total()).filter(|p| !dropped_set.contains(p)).collect();

    let mut masked = BTreeSet::new();
    for &p in &kept {
        let hits: Vec<bool> = modalities.iter().map(|_| rng.random_bool(cfg.modality_mask_rate)).collect();
        let mut hits = hits;
        if hits.iter().all(|&h| h) {
            hits[rng.random_range(0..modalities.len())] = false;
        }
        for (m, h) in modalities.iter().zip(hits) {
            if h {
                masked.insert((p, m.clone()));
            }
        }
    }

    let mut kept_timestamps = BTreeMap::new();
    for (m, &t) in timesteps {
        let mut idx = sample(rng, t, cfg.kept_count(t)).into_vec();
        idx.sort_unstable();
        kept_timestamps.insert(m.clone(), idx);
    }
    Ok(MaskPlan { dropped, kept, masked, kept_timestamps })
}
