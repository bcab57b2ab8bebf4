//! Deterministic synthetic multimodal tiles.
//!
//! Every tile carries a latent class per cell of the finest allowed patch
//! grid. Each modality renders a pixel of class `k` at day `d` as
//! `v[m,k] · (1 + a·sin(2π·ω_k·d/366 + φ[m,k])) + ε` where `v[m,k]` is a fixed
//! random channel vector, `ω_k = k + 1` cycles per year and `ε` is Gaussian
//! noise. A tile is a pure function of `(seed, tile_id)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::spec::{DatasetSpec, ModalitySpec, Registry, ValidatedDataset, validate_dataset_spec};
use super::tile::{store_tile, Labels, ModalityData, PixelLabels, TileSample};
use crate::error::{Error, Result};
use crate::geometry::exact_ratio;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Labels are the latent classes.
    #[default]
    Classes,
    /// Two labels: latent classes in the upper half map to 1.
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Number of latent classes.
    pub classes: usize,
    pub noise_std: f64,
    /// Seed of the per-modality class signatures.
    #[serde(default)]
    pub mixing_seed: u64,
    /// Relative amplitude of the temporal signature.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub label_mode: LabelMode,
}

fn default_amplitude() -> f64 {
    0.5
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            classes: 4,
            noise_std: 0.1,
            mixing_seed: 0,
            amplitude: default_amplitude(),
            label_mode: LabelMode::Classes,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(Error::Config(format!("synthetic data needs at least 2 latent classes, got {}", self.classes)));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::Config("amplitude must be finite".into()));
        }
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        match self.label_mode {
            LabelMode::Classes => self.classes,
            LabelMode::Binary => 2,
        }
    }

    pub fn label_of(&self, z: usize) -> u16 {
        match self.label_mode {
            LabelMode::Classes => z as u16,
            LabelMode::Binary => u16::from(z >= self.classes / 2),
        }
    }
}

/// Fixed class signatures of one modality.
#[derive(Clone, Debug)]
pub struct Signatures {
    /// `classes × channels`.
    pub vectors: Vec<Vec<f64>>,
    pub phases: Vec<f64>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    name.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

pub fn signatures(cfg: &SyntheticConfig, m: &ModalitySpec) -> Signatures {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.mixing_seed ^ name_hash(&m.name));
    let vectors = (0..cfg.classes)
        .map(|_| (0..m.channels).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let phases = (0..cfg.classes).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    Signatures { vectors, phases }
}

/// Noiseless value of channel `c` for class `k` on day `day`.
pub fn render(cfg: &SyntheticConfig, sig: &Signatures, k: usize, c: usize, day: f64) -> f64 {
    let omega = (k + 1) as f64;
    sig.vectors[k][c] * (1.0 + cfg.amplitude * (2.0 * PI * omega * day / 366.0 + sig.phases[k]).sin())
}

pub fn tile_rng(seed: u64, tile_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tile_id);
    rng
}

/// Latent class of every finest-patch cell, row-major.
pub fn latent_cells(ds: &ValidatedDataset, cfg: &SyntheticConfig, rng: &mut impl Rng) -> (usize, Vec<usize>) {
    let n = exact_ratio(ds.spec.tile_size, ds.spec.finest_patch()).expect("validated");
    let cells = (0..n * n).map(|_| rng.random_range(0..cfg.classes)).collect();
    (n, cells)
}

fn draw_dates(m: &ModalitySpec, t: usize, rng: &mut impl Rng) -> Option<Vec<u16>> {
    if !m.has_dates {
        return None;
    }
    let mut d: Vec<u16> = sample(rng, 366, t).into_iter().map(|x| x as u16 + 1).collect();
    d.sort_unstable();
    Some(d)
}

/// Generates tile `tile_id` of a validated dataset.
pub fn generate_tile(ds: &ValidatedDataset, cfg: &SyntheticConfig, tile_id: u64) -> Result<TileSample> {
    cfg.validate()?;
    let mut rng = tile_rng(cfg.seed, tile_id);
    let (ncell, cells) = latent_cells(ds, cfg, &mut rng);
    let cell_size = ds.spec.tile_size / ncell as f64;
    let cell_at = |x: f64, y: f64| {
        let cx = ((x / cell_size) as usize).min(ncell - 1);
        let cy = ((y / cell_size) as usize).min(ncell - 1);
        cells[cy * ncell + cx]
    };
    let mut counts = vec![0usize; cfg.classes];
    cells.iter().for_each(|&z| counts[z] += 1);
    let dominant_z = (0..cfg.classes).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).expect("K >= 2");

    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut modalities = BTreeMap::new();
    for m in &ds.modalities {
        let sig = signatures(cfg, m);
        let t = rng.random_range(m.t_range.0..=m.t_range.1);
        let dates = draw_dates(m, t, &mut rng);
        let days: Vec<f64> = match &dates {
            Some(d) => d.iter().map(|&x| x as f64).collect(),
            None => (0..t).map(|i| 183.0 + i as f64).collect(),
        };
        let present = ds.stored_channels(&m.name)?;
        let side = ds.tile_pixels(&m.name)?;
        let res = ds.spec.tile_size / side as f64;
        let mut values = Vec::with_capacity(side * side * t * present.len());
        for y in 0..side {
            for x in 0..side {
                let z = if m.is_context() { dominant_z } else { cell_at((x as f64 + 0.5) * res, (y as f64 + 0.5) * res) };
                for &day in &days {
                    for &c in &present {
                        let v = render(cfg, &sig, z, c, day) + if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        values.push(v as f32);
                    }
                }
            }
        }
        modalities.insert(m.name.clone(), ModalityData::new([side, side, t, present.len()], values, dates)?);
    }

    let label_res = ds.spec.label_resolution();
    let lside = exact_ratio(ds.spec.tile_size, label_res).expect("validated");
    let mut pixel = Vec::with_capacity(lside * lside);
    for y in 0..lside {
        for x in 0..lside {
            pixel.push(cfg.label_of(cell_at((x as f64 + 0.5) * label_res, (y as f64 + 0.5) * label_res)));
        }
    }
    let mut tile_classes: Vec<u16> = cells.iter().map(|&z| cfg.label_of(z)).collect();
    tile_classes.sort_unstable();
    tile_classes.dedup();
    let mut label_counts = vec![0usize; cfg.num_labels()];
    pixel.iter().for_each(|&l| label_counts[l as usize] += 1);
    let dominant = (0..label_counts.len()).max_by_key(|&k| (label_counts[k], std::cmp::Reverse(k))).expect("labels") as u16;
    let labels = Labels {
        tile_classes,
        dominant,
        pixels: Some(PixelLabels { resolution: label_res, side: lside, classes: pixel }),
    };
    Ok(TileSample { dataset: ds.spec.name.clone(), tile_id, modalities, labels: Some(labels) })
}

/// Contents of `manifest.json` in a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub modalities: Vec<ModalitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl Manifest {
    pub fn validated(&self) -> Result<ValidatedDataset> {
        validate_dataset_spec(&self.spec, &Registry::new(self.modalities.clone())?)
    }

    pub fn num_labels(&self) -> Option<usize> {
        self.synthetic.as_ref().map(SyntheticConfig::num_labels)
    }
}

pub const MANIFEST: &str = "manifest.json";

pub fn tile_path(dir: &Path, tile_id: u64) -> PathBuf {
    dir.join(format!("tile_{tile_id:06}.bin"))
}

/// Writes every tile of the dataset and its manifest into `dir`.
pub fn synth_generate(ds: &ValidatedDataset, cfg: &SyntheticConfig, dir: &Path, config_hash: Option<String>) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    for id in 0..ds.spec.num_tiles as u64 {
        store_tile(&tile_path(dir, id), &generate_tile(ds, cfg, id)?)?;
    }
    let manifest = Manifest {
        spec: ds.spec.clone(),
        modalities: ds.modalities.clone(),
        synthetic: Some(cfg.clone()),
        config_hash,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = fs::read(dir.join(MANIFEST))?;
    Ok(serde_json::from_slice(&bytes)?)
}
