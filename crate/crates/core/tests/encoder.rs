use std::collections::BTreeMap;

use anysat_core::data::presets::{self, Preset};
use anysat_core::data::{generate_tile, validate_dataset_spec, ModalityData, ModalitySpec, Registry, SyntheticConfig, ValidatedDataset};
use anysat_core::encoder::{date_encoding, encode_modality, encode_tile, ltae, spatial_transformer};
use anysat_core::geometry::{subpatch_layout, TileGeometry};
use anysat_core::model::{init_seeded, projector_shapes, ModelConfig, PAD_VALUE};
use anysat_core::nn::{linear, mlp};
use anysat_core::numerics::{grad_check, GradCheckOptions, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> ModelConfig {
    ModelConfig { embed_dim: 16, heads: 2, encoder_blocks: 2, ltae_heads: 2, ltae_key_dim: 4, ..ModelConfig::with_width(16) }
}

fn params(cfg: &ModelConfig, mods: &[ModalitySpec], seed: u64) -> ParamStore {
    init_seeded(cfg, &projector_shapes(cfg, mods).unwrap(), seed).unwrap()
}

fn validated(p: &Preset) -> ValidatedDataset {
    validate_dataset_spec(&p.spec, &Registry::new(p.modalities.iter().cloned()).unwrap()).unwrap()
}

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn ts_spec() -> ModalitySpec {
    ModalitySpec::time_series("s2", 10.0, (1, 8), 5, 10)
}

#[test]
fn single_date_series_reduces_to_output_mlp() {
    let cfg = model();
    let store = params(&cfg, &[ts_spec()], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[3, 1, 5], -2.0, 2.0);
    let mut g = Graph::new(&store, false);
    let xv = g.constant(x);
    let got = ltae(&mut g, "encoder/proj/s2/ltae", &cfg, xv, &[120.0]).unwrap();
    let h = linear(&mut g, "encoder/proj/s2/ltae/in", xv).unwrap();
    let pe = g.constant(date_encoding(&[120.0], cfg.embed_dim));
    let h = g.add(h, pe).unwrap();
    let h = g.reshape(h, &[3, cfg.embed_dim]).unwrap();
    let want = mlp(&mut g, "encoder/proj/s2/ltae/out", h).unwrap();
    assert!(g.value(got.out).max_abs_diff(g.value(want)) < 1e-12);
    assert!(g.value(got.weights).data().iter().all(|&w| w == 1.0));
}

#[test]
fn duplicated_dates_leave_output_unchanged() {
    let cfg = model();
    let store = params(&cfg, &[ts_spec()], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, t, c) = (4, 5, 5);
    let x = random(&mut rng, &[n, t, c], -2.0, 2.0);
    let days: Vec<f64> = (0..t).map(|i| 20.0 + 60.0 * i as f64).collect();
    let mut doubled = Vec::with_capacity(n * 2 * t * c);
    for r in 0..n {
        for k in 0..t {
            let o = (r * t + k) * c;
            doubled.extend_from_slice(&x.data()[o..o + c]);
            doubled.extend_from_slice(&x.data()[o..o + c]);
        }
    }
    let x2 = Tensor::new(vec![n, 2 * t, c], doubled).unwrap();
    let days2: Vec<f64> = days.iter().flat_map(|&d| [d, d]).collect();

    let mut g = Graph::new(&store, false);
    let a = g.constant(x);
    let b = g.constant(x2);
    let a = ltae(&mut g, "encoder/proj/s2/ltae", &cfg, a, &days).unwrap();
    let b = ltae(&mut g, "encoder/proj/s2/ltae", &cfg, b, &days2).unwrap();
    assert!(g.value(a.out).max_abs_diff(g.value(b.out)) < 1e-10);
}

#[test]
fn attention_weights_normalised_per_head() {
    let cfg = model();
    let store = params(&cfg, &[ts_spec()], 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[6, 7, 5], -5.0, 5.0);
    let days: Vec<f64> = (1..=7).map(|i| i as f64 * 40.0).collect();
    let mut g = Graph::new(&store, false);
    let xv = g.constant(x);
    let out = ltae(&mut g, "encoder/proj/s2/ltae", &cfg, xv, &days).unwrap();
    let w = g.value(out.weights);
    assert_eq!(w.shape(), &[6, cfg.ltae_heads, 7]);
    for row in w.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn uniform_data(side: usize, t: usize, c: usize, rng: &mut impl Rng) -> ModalityData {
    let series: Vec<f32> = (0..t * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let values = (0..side * side).flat_map(|_| series.iter().copied()).collect();
    let dates = (t > 1).then(|| (1..=t as u16).map(|d| d * 30).collect());
    ModalityData::new([side, side, t, c], values, dates).unwrap()
}

#[test]
fn output_width_and_identical_subpatches() {
    let cfg = model();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for delta in [1, 2, 5] {
        let spec = ModalitySpec::image("img", 1.0, 3, delta);
        let store = params(&cfg, std::slice::from_ref(&spec), 8);
        let geom = TileGeometry::new(20.0, 10.0).unwrap();
        let layout = subpatch_layout(10.0, 1.0, delta).unwrap();
        assert_eq!(layout.delta_eff, delta);
        let data = uniform_data(20, 1, 3, &mut rng);
        let mut g = Graph::new(&store, false);
        let enc = encode_modality(&mut g, &cfg, &spec, &[0, 1, 2], &data, &geom, &layout).unwrap();
        assert_eq!(g.shape(enc.patches), &[4, cfg.embed_dim]);
        let sub = g.value(enc.subpatches);
        assert_eq!(sub.shape(), &[4, layout.count(), cfg.embed_dim]);
        let first = sub.data()[..cfg.embed_dim].to_vec();
        for row in sub.data().chunks(cfg.embed_dim) {
            assert_eq!(row, first.as_slice());
        }
    }
}

#[test]
fn one_subpatch_patch_and_scale_invariant_token_count() {
    let cfg = model();
    let p = presets::toy_two_modality(1);
    let ds = validated(&p);
    let tile = generate_tile(&ds, &SyntheticConfig::default(), 0).unwrap();
    let store = params(&cfg, &p.modalities, 9);
    let mut counts = Vec::new();
    for patch in [10.0, 20.0] {
        let mut g = Graph::new(&store, false);
        let map = encode_tile(&mut g, &cfg, &ds, &tile, patch, None).unwrap();
        let ts = map.get("ts").unwrap();
        assert_eq!(ts.layout.count(), 1);
        assert_eq!(g.shape(ts.patches)[1], cfg.embed_dim);
        counts.push(g.shape(ts.subpatches)[1]);
    }
    assert_eq!(counts, vec![1, 1]);
}

#[test]
fn transformer_ignores_token_order() {
    let cfg = model();
    let store = params(&cfg, &[ts_spec()], 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let e = cfg.embed_dim;
    let tokens = random(&mut rng, &[1, 6, e], -1.0, 1.0);
    let perm = [3, 0, 5, 1, 4, 2];
    let permuted: Vec<f64> = perm.iter().flat_map(|&i| tokens.row(0)[i * e..(i + 1) * e].to_vec()).collect();
    let mut g = Graph::new(&store, false);
    let a = g.constant(tokens.clone());
    let b = g.constant(Tensor::new(vec![1, 6, e], permuted).unwrap());
    let a = spatial_transformer(&mut g, &cfg, a).unwrap();
    let b = spatial_transformer(&mut g, &cfg, b).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-10);
}

#[test]
fn tsai_like_tile_has_27_unimodal_embeddings() {
    let cfg = model();
    let p = presets::tsai_like(1);
    let ds = validated(&p);
    let tile = generate_tile(&ds, &SyntheticConfig::default(), 0).unwrap();
    let store = params(&cfg, &p.modalities, 12);
    let mut g = Graph::new(&store, false);
    let map = encode_tile(&mut g, &cfg, &ds, &tile, 20.0, None).unwrap();
    assert_eq!(map.len(), 27);
    for (_, m) in &map.modalities {
        assert_eq!(g.shape(m.patches), &[9, cfg.embed_dim]);
    }
}

#[test]
fn single_modality_tile() {
    let cfg = model();
    let mut p = presets::toy_two_modality(1);
    p.spec.modalities.retain(|m| m == "vhr");
    p.modalities.retain(|m| m.name == "vhr");
    let ds = validated(&p);
    let tile = generate_tile(&ds, &SyntheticConfig::default(), 0).unwrap();
    let store = params(&cfg, &p.modalities, 13);
    let mut g = Graph::new(&store, false);
    let map = encode_tile(&mut g, &cfg, &ds, &tile, 10.0, None).unwrap();
    assert_eq!(map.len(), 16);
}

#[test]
fn padding_value_receives_gradient() {
    let cfg = ModelConfig { encoder_blocks: 1, ..model() };
    let mut p = presets::toy_two_modality(1);
    p.spec.channel_subsets = BTreeMap::from([("ts".to_string(), vec![0, 1, 3])]);
    let ds = validated(&p);
    let tile = generate_tile(&ds, &SyntheticConfig::default(), 0).unwrap();
    assert_eq!(tile.modality("ts").unwrap().channels(), 3);
    let mut store = params(&cfg, &p.modalities, 14);
    store.by_name_mut(PAD_VALUE).unwrap().value = Tensor::scalar(0.3);
    store.set_trainable(|n| n == PAD_VALUE);
    // A fixed random projection: squared norms are flat after the final layer norm.
    let w = random(&mut ChaCha8Rng::seed_from_u64(16), &[16, cfg.embed_dim], -1.0, 1.0);
    let mut f = |g: &mut Graph| {
        let map = encode_tile(g, &cfg, &ds, &tile, 10.0, None)?;
        let x = map.get("ts")?.patches;
        let w = g.constant(w.clone());
        let y = g.mul(x, w)?;
        g.sum_all(y)
    };
    let report = grad_check(&mut store, &mut f, 1e-5, &GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report:?}");
    let mut g = Graph::new(&store, true);
    let root = f(&mut g).unwrap();
    let grads = g.backward(root).unwrap();
    let id = store.id(PAD_VALUE).unwrap();
    let pad_grad = grads.by_param.iter().find(|(i, _)| *i == id).map(|(_, t)| t.item()).unwrap();
    assert!(pad_grad.abs() > 1e-8, "{pad_grad}");
}

#[test]
fn nine_bands_padded_to_ten() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&mut rng, &[4, 2, 9], -1.0, 1.0);
    let xv = g.constant(x.clone());
    let pad = g.constant(Tensor::scalar(-0.7));
    let present: Vec<usize> = (0..10).filter(|&c| c != 6).collect();
    let y = g.pad_channels(xv, pad, &present, 10).unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), &[4, 2, 10]);
    for (row, src) in y.data().chunks(10).zip(x.data().chunks(9)) {
        assert_eq!(row[6], -0.7);
        let kept: Vec<f64> = row.iter().enumerate().filter(|(c, _)| *c != 6).map(|(_, v)| *v).collect();
        assert_eq!(kept, src);
    }
    let same = g.pad_channels(xv, pad, &(0..9).collect::<Vec<_>>(), 9).unwrap();
    assert_eq!(g.value(same), &x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn embeddings_finite_on_bounded_inputs(seed in any::<u64>()) {
        let cfg = ModelConfig { encoder_blocks: 1, ..model() };
        let p = presets::tsai_like(1);
        let ds = validated(&p);
        let mut tile = generate_tile(&ds, &SyntheticConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in tile.modalities.values_mut() {
            m.values.iter_mut().for_each(|v| *v = rng.random_range(-5.0..5.0));
        }
        let store = params(&cfg, &p.modalities, seed);
        let mut g = Graph::new(&store, false);
        let map = encode_tile(&mut g, &cfg, &ds, &tile, 30.0, None).unwrap();
        for (_, m) in &map.modalities {
            prop_assert!(g.value(m.patches).is_finite());
        }
    }
}
