use rand::seq::index::sample;
use rand::Rng;

use super::spec::DatasetSpec;
use crate::error::{Error, Result};

/// One training step's draw.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraw {
    /// Index into the dataset list.
    pub dataset: usize,
    pub patch_size: f64,
    pub tile_ids: Vec<u64>,
}

/// Picks a dataset (uniformly unless weighted), a patch size uniformly from
/// its allowed set, and `B_d` distinct tiles.
pub fn sample_step(datasets: &[DatasetSpec], rng: &mut impl Rng) -> Result<StepDraw> {
    if datasets.is_empty() {
        return Err(Error::Config("no datasets to sample from".into()));
    }
    for d in datasets {
        if d.batch_size > d.num_tiles {
            return Err(Error::BatchTooLarge { dataset: d.name.clone(), batch: d.batch_size, tiles: d.num_tiles });
        }
        if d.patch_sizes.is_empty() {
            return Err(Error::Dataset { dataset: d.name.clone(), reason: "no patch sizes".into() });
        }
    }
    let dataset = if datasets.iter().all(|d| d.weight.is_none()) {
        rng.random_range(0..datasets.len())
    } else {
        let w: Vec<f64> = datasets.iter().map(|d| d.weight.unwrap_or(1.0)).collect();
        let mut u = rng.random_range(0.0..w.iter().sum::<f64>());
        let mut pick = w.len() - 1;
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                pick = i;
                break;
            }
            u -= wi;
        }
        pick
    };
    let d = &datasets[dataset];
    let patch_size = d.patch_sizes[rng.random_range(0..d.patch_sizes.len())];
    let tile_ids = sample(rng, d.num_tiles, d.batch_size).into_iter().map(|i| i as u64).collect();
    Ok(StepDraw { dataset, patch_size, tile_ids })
}
