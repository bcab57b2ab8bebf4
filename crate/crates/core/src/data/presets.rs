//! Dataset descriptors mirroring the published dataset table, plus small
//! synthetic datasets sized for a laptop.

use std::collections::BTreeMap;

use super::spec::{DatasetSpec, ModalitySpec};

use ModalitySpec as M;

/// A dataset with the modality specs it references.
#[derive(Clone, Debug)]
pub struct Preset {
    pub spec: DatasetSpec,
    pub modalities: Vec<ModalitySpec>,
}

fn dataset(name: &str, s: f64, p: &[f64], batch: usize, tiles: usize, mods: Vec<ModalitySpec>) -> Preset {
    Preset {
        spec: DatasetSpec {
            name: name.into(),
            tile_size: s,
            modalities: mods.iter().map(|m| m.name.clone()).collect(),
            batch_size: batch,
            patch_sizes: p.to_vec(),
            num_tiles: tiles,
            weight: None,
            label_resolution: None,
            channel_subsets: BTreeMap::new(),
        },
        modalities: mods,
    }
}

pub fn tsai_ts() -> Preset {
    dataset(
        "tsai-ts",
        60.0,
        &[10.0, 20.0, 30.0],
        384,
        50_000,
        vec![M::image("aerial", 0.2, 4, 1), M::time_series("s1", 10.0, (10, 70), 3, 10), M::time_series("s2", 10.0, (10, 70), 10, 10)],
    )
}

/// Time series use 4-pixel sub-patches: 10-pixel ones do not tile a 160 m patch.
pub fn pastis_hd() -> Preset {
    dataset(
        "pastis-hd",
        1280.0,
        &[40.0, 80.0, 160.0],
        8,
        2433,
        vec![M::image("spot", 1.0, 4, 1), M::time_series("s1", 10.0, (140, 140), 3, 4), M::time_series("s2", 10.0, (38, 61), 10, 4)],
    )
}

/// Not encodable: 102.4 m tiles are not a whole number of any listed patch size.
pub fn flair() -> Preset {
    dataset(
        "flair",
        102.4,
        &[10.0, 20.0, 50.0],
        96,
        77_762,
        vec![M::image("aerial", 0.2, 5, 1), M::time_series("s2", 10.0, (20, 114), 10, 10)],
    )
}

pub fn planted() -> Preset {
    dataset(
        "planted",
        120.0,
        &[30.0, 60.0],
        2048,
        1_346_662,
        vec![
            M::time_series("s2", 10.0, (8, 8), 10, 10),
            M::time_series("s1", 10.0, (8, 8), 3, 10),
            M::time_series("landsat7", 30.0, (20, 20), 3, 10),
            M::time_series("alos2", 30.0, (4, 4), 3, 10),
            M::context("modis", 250.0, (60, 60), 7),
        ],
    )
}

pub fn s2naip_urban() -> Preset {
    dataset(
        "s2naip-urban",
        640.0,
        &[40.0, 80.0, 160.0],
        16,
        515_270,
        vec![
            M::image("naip", 1.25, 4, 1),
            M::time_series("s2", 10.0, (16, 32), 10, 4),
            M::time_series("s1", 10.0, (2, 8), 3, 4),
            M::time_series("landsat8", 10.0, (4, 4), 8, 4),
        ],
    )
}

pub fn bradd_s1ts() -> Preset {
    dataset("bradd-s1ts", 480.0, &[10.0], 8, 13_000, vec![M::time_series("s1", 10.0, (20, 66), 10, 10)])
}

pub fn sickle() -> Preset {
    dataset(
        "sickle",
        320.0,
        &[10.0],
        8,
        35_000,
        vec![M::time_series("s2", 10.0, (13, 148), 10, 10), M::time_series("landsat8", 10.0, (8, 34), 8, 10)],
    )
}

pub fn timesen2crop() -> Preset {
    dataset("timesen2crop", 10.0, &[10.0], 256, 1_200_000, vec![M::time_series("s2", 10.0, (29, 29), 10, 10)])
}

pub fn sen1floods11() -> Preset {
    dataset(
        "sen1floods11",
        5120.0,
        &[80.0],
        4,
        4_800,
        vec![M::image("s2", 10.0, 10, 10), M::image("s1", 10.0, 3, 10)],
    )
}

/// Every dataset of the published table, pretraining collection first.
pub fn table() -> Vec<Preset> {
    vec![tsai_ts(), pastis_hd(), flair(), planted(), s2naip_urban(), bradd_s1ts(), sickle(), timesen2crop(), sen1floods11()]
}

/// Small two-modality dataset: a 10 m time series and a 2.5 m image on
/// 40 m tiles with 10 m and 20 m patches.
pub fn toy_two_modality(num_tiles: usize) -> Preset {
    let mut p = dataset(
        "toy",
        40.0,
        &[10.0, 20.0],
        4,
        num_tiles,
        vec![M::time_series("ts", 10.0, (4, 6), 4, 10), M::image("vhr", 2.5, 3, 2)],
    );
    p.spec.label_resolution = Some(2.5);
    p
}

/// Tiny scaled-down stand-in for the tree-species dataset: 60 m tiles,
/// three modalities at the published resolutions but coarsened imagery.
pub fn tsai_like(num_tiles: usize) -> Preset {
    dataset(
        "tsai-like",
        60.0,
        &[20.0, 30.0],
        4,
        num_tiles,
        vec![M::image("aerial", 5.0, 4, 1), M::time_series("s1", 10.0, (3, 5), 3, 10), M::time_series("s2", 10.0, (3, 5), 10, 10)],
    )
}
