use std::path::Path;

use anysat_core::checkpoint::{backbone_hash, Checkpoint, CheckpointKind, CheckpointMeta, DType, CHECKPOINT_MAGIC};
use anysat_core::config::{OptimConfig, RunConfig};
use anysat_core::data::{presets, Dataset, SyntheticConfig};
use anysat_core::model::ModelConfig;
use anysat_core::numerics::{ParamStore, Tensor};
use anysat_core::ssl::{pretrain, PretrainState, SslConfig, StepRecord};
use anysat_core::Error;
use proptest::prelude::*;

fn model() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        heads: 2,
        encoder_blocks: 1,
        combiner_blocks: 1,
        predictor_blocks: 1,
        ltae_heads: 2,
        ltae_key_dim: 4,
        ..ModelConfig::with_width(16)
    }
}

fn toy() -> Dataset {
    let p = presets::toy_two_modality(6);
    Dataset::synthetic(&p.spec, &p.modalities, &SyntheticConfig::default()).unwrap()
}

fn meta(cfg: &ModelConfig) -> CheckpointMeta {
    CheckpointMeta {
        kind: CheckpointKind::Pretrain,
        config_hash: "test".into(),
        config: RunConfig { model: cfg.clone(), ..Default::default() },
        step: 0,
        seed: 5,
        param_counts: Default::default(),
        backbone_hash: String::new(),
        datasets: vec!["toy".into()],
        optimizer_step: 0,
        scheduler: None,
        plateau_window: Vec::new(),
        head: None,
        backbone_pretrained: None,
    }
}

fn steps(state: &mut PretrainState, ds: &Dataset, n: usize) -> Vec<StepRecord> {
    let cfg = model();
    pretrain(std::slice::from_ref(ds), &cfg, &SslConfig::default(), &OptimConfig::default(), 5, n, state, |_, _| Ok(())).unwrap()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ds = toy();
    let cfg = model();
    let mut straight = PretrainState::init(&cfg, std::slice::from_ref(&ds), &OptimConfig::default(), 5).unwrap();
    let all = steps(&mut straight, &ds, 4);

    let mut first = PretrainState::init(&cfg, std::slice::from_ref(&ds), &OptimConfig::default(), 5).unwrap();
    let mut recs = steps(&mut first, &ds, 2);
    let bytes = Checkpoint::from_pretrain(meta(&cfg), &first, DType::F64).to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
    assert_eq!(ck.meta.step, 2);
    let mut resumed = ck.pretrain_state().unwrap();
    recs.extend(steps(&mut resumed, &ds, 2));

    assert_eq!(recs, all);
    assert!(resumed.student.same_values(&straight.student));
    assert!(resumed.teacher.same_values(&straight.teacher));
    assert_eq!(ck.backbone().unwrap().count(false), first.teacher.count(false));
}

#[test]
fn f64_is_exact_and_f32_rounds() {
    let ds = toy();
    let cfg = model();
    let state = PretrainState::init(&cfg, std::slice::from_ref(&ds), &OptimConfig::default(), 6).unwrap();
    let ck = Checkpoint::from_pretrain(meta(&cfg), &state, DType::F64);
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("mem")).unwrap();
    assert_eq!(back, ck);

    let ck32 = Checkpoint::from_pretrain(meta(&cfg), &state, DType::F32);
    let bytes = ck32.to_bytes().unwrap();
    assert!(bytes.len() < ck.to_bytes().unwrap().len());
    let teacher = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap().store("teacher").unwrap();
    for p in state.teacher.iter() {
        let q = teacher.by_name(&p.name).unwrap();
        for (a, b) in p.value.data().iter().zip(q.value.data()) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }
}

#[test]
fn save_and_load_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let cfg = model();
    let mut ck = Checkpoint { meta: meta(&cfg), records: Vec::new() };
    let mut store = ParamStore::new();
    store.insert("encoder/w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap()).unwrap();
    ck.add_store("teacher", &store, DType::F64);
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.meta.param_counts["teacher"], 6);
    assert!(matches!(back.store("student"), Err(Error::TreeMismatch(_))));
    assert!(matches!(back.pretrain_state(), Err(Error::TreeMismatch(_))));
}

#[test]
fn bad_magic_and_version_rejected() {
    let cfg = model();
    let bytes = Checkpoint { meta: meta(&cfg), records: Vec::new() }.to_bytes().unwrap();
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&wrong, Path::new("x")), Err(Error::Format { .. })));
    let mut future = bytes.clone();
    future[CHECKPOINT_MAGIC.len()..CHECKPOINT_MAGIC.len() + 4].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&future, Path::new("x")), Err(Error::Format { .. })));
    assert!(matches!(Checkpoint::from_bytes(b"", Path::new("x")), Err(Error::Format { .. })));
}

#[test]
fn backbone_hash_ignores_heads_and_sees_backbone() {
    let mut store = ParamStore::new();
    store.insert("encoder/w", Tensor::full(&[2], 1.0)).unwrap();
    store.insert("combiner/b", Tensor::full(&[3], 0.5)).unwrap();
    let base = backbone_hash(&store);
    assert_eq!(base.len(), 64);

    let mut with_head = store.clone();
    with_head.insert("head/cls/w", Tensor::full(&[4], 9.0)).unwrap();
    with_head.insert("predictor/w", Tensor::full(&[4], 9.0)).unwrap();
    assert_eq!(backbone_hash(&with_head), base);

    let mut changed = store.clone();
    changed.by_name_mut("encoder/w").unwrap().value = Tensor::new(vec![2], vec![1.0, 1.0 + 1e-15]).unwrap();
    assert_ne!(backbone_hash(&changed), base);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncation_is_an_error_not_a_panic(values in proptest::collection::vec(-1e6f64..1e6, 1..20), cut in 0.0f64..1.0) {
        let cfg = model();
        let mut ck = Checkpoint { meta: meta(&cfg), records: Vec::new() };
        let mut store = ParamStore::new();
        store.insert("encoder/w", Tensor::new(vec![values.len()], values).unwrap()).unwrap();
        ck.add_store("teacher", &store, DType::F64);
        let bytes = ck.to_bytes().unwrap();
        let n = ((bytes.len() - 1) as f64 * cut) as usize;
        // Cutting exactly after the metadata leaves a valid record-free file.
        let header = Checkpoint { meta: ck.meta.clone(), records: Vec::new() }.to_bytes().unwrap().len();
        prop_assume!(n != header);
        let r = Checkpoint::from_bytes(&bytes[..n], Path::new("x"));
        prop_assert!(matches!(r, Err(Error::CorruptHeader { .. }) | Err(Error::Format { .. })), "cut at {n}: {r:?}");
    }
}
