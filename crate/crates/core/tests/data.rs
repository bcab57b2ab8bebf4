use std::collections::BTreeMap;
use std::fs;

use anysat_core::data::presets::{self, Preset};
use anysat_core::data::tile::{decode_tile, encode_tile};
use anysat_core::data::{
    generate_tile, load_tile, sample_step, store_tile, synth_generate, validate_dataset_spec, Dataset, ModalityData, ModalitySpec,
    Registry, SyntheticConfig, TileSample, ValidatedDataset,
};
use anysat_core::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn validated(p: &Preset) -> ValidatedDataset {
    validate_dataset_spec(&p.spec, &Registry::new(p.modalities.iter().cloned()).unwrap()).unwrap()
}

#[test]
fn pastis_like_spec_is_valid() {
    let v = validated(&presets::pastis_hd());
    assert_eq!(v.modalities.len(), 3);
    assert_eq!(v.layout(160.0, "s2").unwrap().count(), 16);
}

#[test]
fn non_dividing_patch_size_rejected() {
    let mut p = presets::pastis_hd();
    p.spec.patch_sizes.push(70.0);
    let r = validate_dataset_spec(&p.spec, &Registry::new(p.modalities.iter().cloned()).unwrap());
    assert!(matches!(r, Err(Error::Divisibility { .. })), "{r:?}");
}

#[test]
fn unknown_modality_rejected() {
    let mut p = presets::toy_two_modality(4);
    p.spec.modalities.push("lidar".into());
    let r = validate_dataset_spec(&p.spec, &Registry::new(p.modalities.iter().cloned()).unwrap());
    assert!(matches!(r, Err(Error::UnknownModality(ref m)) if m == "lidar"), "{r:?}");
}

#[test]
fn duplicate_registry_entry_rejected() {
    let m = ModalitySpec::image("a", 1.0, 3, 1);
    assert!(Registry::new([m.clone(), m]).is_err());
}

/// Latent class under the centre of pixel `(x, y)` of a modality with resolution `res`.
fn class_at(tile: &TileSample, res: f64, x: usize, y: usize) -> u16 {
    let px = tile.labels.as_ref().unwrap().pixels.as_ref().unwrap();
    let lx = ((x as f64 + 0.5) * res / px.resolution) as usize;
    let ly = ((y as f64 + 0.5) * res / px.resolution) as usize;
    px.classes[ly * px.side + lx]
}

#[test]
fn noiseless_rendering_depends_only_on_class() {
    let p = presets::toy_two_modality(3);
    let ds = validated(&p);
    let cfg = SyntheticConfig { classes: 2, noise_std: 0.0, ..Default::default() };
    for id in 0..3 {
        let tile = generate_tile(&ds, &cfg, id).unwrap();
        for m in &ds.modalities {
            let data = tile.modality(&m.name).unwrap();
            let mut seen: BTreeMap<u16, Vec<f32>> = BTreeMap::new();
            for y in 0..data.side() {
                for x in 0..data.side() {
                    let z = class_at(&tile, m.resolution, x, y);
                    let series = data.pixel(x, y).to_vec();
                    let first = seen.entry(z).or_insert_with(|| series.clone());
                    assert_eq!(first, &series, "tile {id} modality {} class {z}", m.name);
                }
            }
        }
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let p = presets::tsai_like(3);
    let ds = validated(&p);
    let cfg = SyntheticConfig { seed: 9, ..Default::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_generate(&ds, &cfg, a.path(), None).unwrap();
    synth_generate(&ds, &cfg, b.path(), None).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
    let loaded = Dataset::load(a.path()).unwrap();
    assert_eq!(loaded.tiles, Dataset::synthetic(&p.spec, &p.modalities, &cfg).unwrap().tiles);
}

#[test]
fn different_seeds_differ() {
    let ds = validated(&presets::toy_two_modality(1));
    let a = generate_tile(&ds, &SyntheticConfig { seed: 1, ..Default::default() }, 0).unwrap();
    let b = generate_tile(&ds, &SyntheticConfig { seed: 2, ..Default::default() }, 0).unwrap();
    assert_ne!(a.modalities, b.modalities);
}

#[test]
fn single_latent_class_rejected() {
    let ds = validated(&presets::toy_two_modality(1));
    let r = generate_tile(&ds, &SyntheticConfig { classes: 1, ..Default::default() }, 0);
    assert!(matches!(r, Err(Error::Config(_))));
}

/// Per-patch channel means (over pixels and dates) of every modality, with a bias column.
fn patch_features(ds: &ValidatedDataset, tile: &TileSample, patch: f64) -> (Vec<Vec<f64>>, Vec<u16>) {
    let n = (ds.spec.tile_size / patch) as usize;
    let mut feats = vec![vec![1.0]; n * n];
    for m in &ds.modalities {
        let data = tile.modality(&m.name).unwrap();
        let ppp = (patch / m.resolution) as usize;
        let (t, c) = (data.timesteps(), data.channels());
        for (p, f) in feats.iter_mut().enumerate() {
            let (px, py) = (p % n, p / n);
            let mut mean = vec![0.0; c];
            for y in py * ppp..(py + 1) * ppp {
                for x in px * ppp..(px + 1) * ppp {
                    for (k, v) in data.pixel(x, y).iter().enumerate() {
                        mean[k % c] += *v as f64 / (ppp * ppp * t) as f64;
                    }
                }
            }
            f.extend(mean);
        }
    }
    let labels = (0..n * n).map(|p| class_at(tile, patch, p % n, p / n)).collect();
    (feats, labels)
}

#[test]
fn latent_classes_are_linearly_separable() {
    let p = presets::toy_two_modality(126);
    let ds = validated(&p);
    let cfg = SyntheticConfig { classes: 4, noise_std: 0.1, seed: 3, ..Default::default() };
    let mut x = Vec::new();
    let mut z = Vec::new();
    for id in 0..126 {
        let (f, l) = patch_features(&ds, &generate_tile(&ds, &cfg, id).unwrap(), 10.0);
        x.extend(f);
        z.extend(l);
    }
    let (train, test) = (0..1000, 1000..2000);
    let d = x[0].len();
    let a = DMatrix::from_fn(1000, d, |i, j| x[train.start + i][j]);
    let y = DMatrix::from_fn(1000, 4, |i, k| f64::from(z[train.start + i] as usize == k));
    let w = a.clone().svd(true, true).solve(&y, 1e-12).unwrap();
    let accuracy = |rows: std::ops::Range<usize>| {
        let hits = rows
            .clone()
            .filter(|&i| {
                let scores: Vec<f64> = (0..4).map(|k| (0..d).map(|j| x[i][j] * w[(j, k)]).sum()).collect();
                let best = (0..4).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
                best == z[i] as usize
            })
            .count();
        hits as f64 / rows.len() as f64
    };
    let (tr, te) = (accuracy(train), accuracy(test));
    assert!(tr > 0.9 && te > 0.9, "train {tr:.3}, held-out {te:.3}");
}

#[test]
fn sampler_single_choice() {
    let mut p = presets::toy_two_modality(10);
    p.spec.patch_sizes = vec![20.0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let d = sample_step(std::slice::from_ref(&p.spec), &mut rng).unwrap();
        assert_eq!((d.dataset, d.patch_size), (0, 20.0));
        let mut ids = d.tile_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        assert!(ids.iter().all(|&i| i < 10));
    }
}

#[test]
fn sampler_balances_two_datasets() {
    let specs = [presets::toy_two_modality(10).spec, presets::tsai_like(10).spec];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let first = (0..10_000).filter(|_| sample_step(&specs, &mut rng).unwrap().dataset == 0).count();
    assert!((4850..=5150).contains(&first), "{first}");
}

#[test]
fn sampler_rejects_oversized_batch() {
    let mut p = presets::toy_two_modality(3);
    p.spec.batch_size = 4;
    let r = sample_step(&[p.spec], &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(Error::BatchTooLarge { batch: 4, tiles: 3, .. })));
}

#[test]
fn tile_file_round_trip_and_corruption() {
    let ds = validated(&presets::tsai_like(1));
    let tile = generate_tile(&ds, &SyntheticConfig::default(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    store_tile(&path, &tile).unwrap();
    assert_eq!(load_tile(&path).unwrap(), tile);

    let bytes = fs::read(&path).unwrap();
    for cut in [4, 15, 40, bytes.len() - 3] {
        fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(load_tile(&path), Err(Error::CorruptHeader { .. })), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(load_tile(&path), Err(Error::Format { .. })));
}

proptest! {
    #[test]
    fn tile_codec_round_trip(side in 1usize..5, t in 1usize..4, c in 1usize..4, seed in any::<u64>(), dated in any::<bool>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f32> = (0..side * side * t * c).map(|_| rng.random_range(-5.0..5.0)).collect();
        let dates = dated.then(|| (1..=t as u16).map(|d| d * 7).collect());
        let mut modalities = BTreeMap::new();
        modalities.insert("m".to_string(), ModalityData::new([side, side, t, c], values, dates).unwrap());
        let tile = TileSample { dataset: "d".into(), tile_id: seed, modalities, labels: None };
        let bytes = encode_tile(&tile).unwrap();
        prop_assert_eq!(decode_tile(&bytes, std::path::Path::new("x")).unwrap(), tile);
    }
}
