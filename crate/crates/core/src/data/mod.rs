//! Modality and dataset descriptors, synthetic tiles, the tile file format
//! and the multi-dataset sampler.

pub mod presets;
pub mod sampler;
pub mod spec;
pub mod synth;
pub mod tile;

use std::path::Path;

pub use sampler::{sample_step, StepDraw};
pub use spec::{validate_dataset_spec, DatasetSpec, ModalitySpec, Registry, Role, ValidatedDataset};
pub use synth::{generate_tile, read_manifest, synth_generate, LabelMode, Manifest, SyntheticConfig};
pub use tile::{load_tile, load_tile_checked, store_tile, Labels, ModalityData, PixelLabels, TileSample};

use crate::error::{Error, Result};

/// A dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub info: ValidatedDataset,
    pub tiles: Vec<TileSample>,
}

impl Dataset {
    /// Generates every tile without touching the disk.
    pub fn synthetic(spec: &DatasetSpec, modalities: &[ModalitySpec], cfg: &SyntheticConfig) -> Result<Self> {
        let info = validate_dataset_spec(spec, &Registry::new(modalities.iter().cloned())?)?;
        let tiles = (0..spec.num_tiles as u64).map(|id| generate_tile(&info, cfg, id)).collect::<Result<_>>()?;
        let manifest = Manifest { spec: spec.clone(), modalities: info.modalities.clone(), synthetic: Some(cfg.clone()), config_hash: None };
        Ok(Dataset { manifest, info, tiles })
    }

    /// Reads a dataset directory written by [`synth_generate`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let info = manifest.validated()?;
        let mut tiles = Vec::with_capacity(info.spec.num_tiles);
        for id in 0..info.spec.num_tiles as u64 {
            let tile = load_tile_checked(&synth::tile_path(dir, id), &info)?;
            if tile.tile_id != id {
                return Err(Error::Dataset { dataset: info.spec.name.clone(), reason: format!("file for tile {id} holds tile {}", tile.tile_id) });
            }
            tiles.push(tile);
        }
        Ok(Dataset { manifest, info, tiles })
    }

    pub fn name(&self) -> &str {
        &self.info.spec.name
    }

    pub fn tile(&self, id: u64) -> Result<&TileSample> {
        self.tiles.get(id as usize).ok_or_else(|| Error::Dataset {
            dataset: self.info.spec.name.clone(),
            reason: format!("no tile {id}"),
        })
    }

    /// Restriction to the tiles whose ids satisfy `keep`, renumbered from 0.
    pub fn split(&self, keep: impl Fn(u64) -> bool) -> Dataset {
        let mut out = self.clone();
        out.tiles = self.tiles.iter().filter(|t| keep(t.tile_id)).cloned().collect();
        for (i, t) in out.tiles.iter_mut().enumerate() {
            t.tile_id = i as u64;
        }
        out.info.spec.num_tiles = out.tiles.len();
        out.manifest.spec.num_tiles = out.tiles.len();
        out
    }
}
