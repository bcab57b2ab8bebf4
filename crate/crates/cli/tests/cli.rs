use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anysat_core::checkpoint::Checkpoint;
use anysat_core::data::{load_tile, read_manifest, Dataset, Labels};
use anysat_core::heads::{score, HeadSpec, Metrics};
use serde_json::{json, Value};
use tempfile::TempDir;

fn anysat(args: &[&str]) -> Output {
    anysat_env(args, None)
}

fn anysat_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_anysat"));
    cmd.args(args).env_remove("ANYSAT_SEED");
    if let Some(s) = seed {
        cmd.env("ANYSAT_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn write_config(dir: &Path, name: &str, cfg: Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn toy_config(tiles: usize) -> Value {
    json!({
        "model": {"embed_dim": 16},
        "data": {"seed": 3, "datasets": [{"preset": "toy", "num_tiles": tiles}]},
        "task": {"task": "segment", "epochs": 2, "lr": 0.01}
    })
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap()))
        .collect();
    files.sort();
    files
}

fn trace(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn synth_data_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", toy_config(6));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&anysat(&["synth-data", "--config", p(&cfg), "--out", p(&a)]));
    ok(&anysat(&["synth-data", "--config", p(&cfg), "--out", p(&b)]));
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(fa.len(), 7);
    assert_eq!(fa, fb);
}

#[test]
fn synth_data_rejects_single_class() {
    let tmp = TempDir::new().unwrap();
    let mut c = toy_config(4);
    c["data"]["datasets"][0]["synthetic"] = json!({"seed": 0, "classes": 1, "noise_std": 0.1});
    let cfg = write_config(tmp.path(), "c.json", c);
    let out = anysat(&["synth-data", "--config", p(&cfg), "--out", p(&tmp.path().join("d"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let mut c = toy_config(4);
    c["ssl"] = json!({"temprature": 0.2});
    let cfg = write_config(tmp.path(), "c.json", c);
    let out = anysat(&["synth-data", "--config", p(&cfg), "--out", p(&tmp.path().join("d"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn tsai_like_manifest_lists_three_modalities() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", json!({"data": {"datasets": [{"preset": "tsai-like", "num_tiles": 2}]}}));
    let dir = tmp.path().join("d");
    let out = anysat(&["synth-data", "--config", p(&cfg), "--out", p(&dir)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("3 modalities"));
    assert_eq!(read_manifest(&dir).unwrap().modalities.len(), 3);
}

#[test]
fn seed_override_changes_data_and_hash() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", toy_config(2));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&anysat(&["synth-data", "--config", p(&cfg), "--out", p(&a)]));
    ok(&anysat_env(&["synth-data", "--config", p(&cfg), "--out", p(&b)], Some("99")));
    let (ma, mb) = (read_manifest(&a).unwrap(), read_manifest(&b).unwrap());
    assert_ne!(ma.config_hash, mb.config_hash);
    assert_ne!(fs::read(a.join("tile_000000.bin")).unwrap(), fs::read(b.join("tile_000000.bin")).unwrap());
    let bad = anysat_env(&["synth-data", "--config", p(&cfg), "--out", p(&b)], Some("seven"));
    assert_eq!(code(&bad), 2);
}

#[test]
fn zero_steps_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", toy_config(4));
    let out = anysat(&["pretrain", "--config", p(&cfg), "--data", "x", "--steps", "0", "--out", "y"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_inputs_are_io_errors() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", toy_config(4));
    let missing = tmp.path().join("nope");
    let out = anysat(&["pretrain", "--config", p(&cfg), "--data", p(&missing), "--steps", "1", "--out", "y"]);
    assert_eq!(code(&out), 4);
    let out = anysat(&["eval", "--ckpt", p(&missing), "--data", p(&missing), "--metrics", "m.json"]);
    assert_eq!(code(&out), 4);
    let out = anysat(&["synth-data", "--config", p(&missing), "--out", p(&missing)]);
    assert_eq!(code(&out), 4);
}

#[test]
fn diverging_run_aborts_with_numeric_code() {
    let tmp = TempDir::new().unwrap();
    let mut c = toy_config(4);
    c["optim"] = json!({"lr": 1e300});
    let cfg = write_config(tmp.path(), "c.json", c);
    let ds = tmp.path().join("d");
    ok(&anysat(&["synth-data", "--config", p(&cfg), "--out", p(&ds)]));
    let out = anysat(&["pretrain", "--config", p(&cfg), "--data", p(&ds), "--steps", "5", "--out", p(&tmp.path().join("x.ck"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn two_datasets_appear_in_the_trace() {
    let tmp = TempDir::new().unwrap();
    let c = json!({
        "model": {"embed_dim": 16},
        "data": {"seed": 1, "datasets": [
            {"preset": "toy", "num_tiles": 4},
            {"preset": "tsai-like", "num_tiles": 4}
        ]}
    });
    let cfg = write_config(tmp.path(), "c.json", c);
    let root = tmp.path().join("data");
    ok(&anysat(&["synth-data", "--config", p(&cfg), "--out", p(&root)]));
    let ck = tmp.path().join("pre.ck");
    ok(&anysat(&[
        "pretrain", "--config", p(&cfg), "--data", p(&root.join("toy")), p(&root.join("tsai-like")), "--steps", "12", "--out", p(&ck),
    ]));
    let lines = trace(&tmp.path().join("pre.trace.jsonl"));
    assert_eq!(lines.len(), 12);
    for name in ["toy", "tsai-like"] {
        assert!(lines.iter().any(|l| l["dataset"] == name), "{name} never sampled");
    }
    for key in ["step", "dataset", "P", "l_jepa", "l_con", "total", "lr", "config_hash"] {
        assert!(lines[0].get(key).is_some(), "trace lacks `{key}`");
    }
}

#[test]
fn ablations_alter_the_trace() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", toy_config(6));
    let ds = tmp.path().join("d");
    ok(&anysat(&["synth-data", "--config", p(&cfg), "--out", p(&ds)]));
    let run = |name: &str, extra: &[&str]| {
        let ck = tmp.path().join(format!("{name}.ck"));
        let mut args = vec!["pretrain", "--config", p(&cfg), "--data", p(&ds), "--steps", "3", "--out", p(&ck)];
        args.extend_from_slice(extra);
        ok(&anysat(&args));
        (trace(&ck.with_extension("trace.jsonl")), Checkpoint::load(&ck).unwrap())
    };
    let (base, base_ck) = run("base", &[]);
    let (nc, nc_ck) = run("nc", &["--ablation", "no-contrastive"]);
    let (rd, _) = run("rd", &["--ablation", "random-drop"]);
    assert!(base.iter().all(|l| l["l_con"].is_f64()));
    for l in &nc {
        assert!(l["l_con"].is_null());
        assert_eq!(l["total"], l["l_jepa"]);
    }
    assert_ne!(base_ck.meta.config_hash, nc_ck.meta.config_hash);
    assert_ne!(base.iter().map(|l| l["dropped"].clone()).collect::<Vec<_>>(), rd.iter().map(|l| l["dropped"].clone()).collect::<Vec<_>>());
}

#[test]
fn resume_continues_bitwise() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", toy_config(6));
    let ds = tmp.path().join("d");
    ok(&anysat(&["synth-data", "--config", p(&cfg), "--out", p(&ds)]));

    let full = tmp.path().join("full.ck");
    ok(&anysat(&["pretrain", "--config", p(&cfg), "--data", p(&ds), "--steps", "4", "--out", p(&full)]));
    let half = tmp.path().join("half.ck");
    ok(&anysat(&["pretrain", "--config", p(&cfg), "--data", p(&ds), "--steps", "2", "--out", p(&half)]));
    let resumed = tmp.path().join("resumed.ck");
    let half_trace = half.with_extension("trace.jsonl");
    ok(&anysat(&[
        "pretrain", "--config", p(&cfg), "--data", p(&ds), "--steps", "2", "--out", p(&resumed), "--resume", p(&half), "--trace", p(&half_trace),
    ]));

    let steps: Vec<u64> = trace(&half_trace).iter().map(|l| l["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![0, 1, 2, 3]);
    assert_eq!(trace(&half_trace), trace(&full.with_extension("trace.jsonl")));
    let (a, b) = (Checkpoint::load(&full).unwrap(), Checkpoint::load(&resumed).unwrap());
    assert_eq!(a.meta.step, 4);
    assert_eq!(a.records, b.records);
}

#[test]
fn resume_with_other_config_warns() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", toy_config(4));
    let mut other = toy_config(4);
    other["ssl"] = json!({"contrastive_weight": 0.5});
    let other = write_config(tmp.path(), "o.json", other);
    let ds = tmp.path().join("d");
    ok(&anysat(&["synth-data", "--config", p(&cfg), "--out", p(&ds)]));
    let ck = tmp.path().join("a.ck");
    ok(&anysat(&["pretrain", "--config", p(&cfg), "--data", p(&ds), "--steps", "1", "--out", p(&ck)]));
    let out = anysat(&["pretrain", "--config", p(&other), "--data", p(&ds), "--steps", "1", "--out", p(&ck), "--resume", p(&ck)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: config hash"));
}

#[test]
fn probe_eval_pipeline() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", toy_config(8));
    let ds = tmp.path().join("d");
    ok(&anysat(&["synth-data", "--config", p(&cfg), "--out", p(&ds)]));
    let pre = tmp.path().join("pre.ck");
    ok(&anysat(&["pretrain", "--config", p(&cfg), "--data", p(&ds), "--steps", "2", "--out", p(&pre)]));
    let ad = tmp.path().join("ad.ck");
    ok(&anysat(&["adapt", "--mode", "probe", "--task", "segment", "--ckpt", p(&pre), "--data", p(&ds), "--out", p(&ad)]));

    let (pre_ck, ad_ck) = (Checkpoint::load(&pre).unwrap(), Checkpoint::load(&ad).unwrap());
    assert_eq!(pre_ck.meta.backbone_hash, ad_ck.meta.backbone_hash);
    assert_eq!(ad_ck.meta.backbone_pretrained, Some(true));

    let metrics = tmp.path().join("m.json");
    let preds = tmp.path().join("preds");
    ok(&anysat(&["eval", "--ckpt", p(&ad), "--data", p(&ds), "--metrics", p(&metrics), "--predictions", p(&preds)]));
    let doc: Value = serde_json::from_slice(&fs::read(&metrics).unwrap()).unwrap();
    let hash = ad_ck.meta.config_hash.clone();
    assert_eq!(doc["config_hash"], hash.as_str());
    let csv = fs::read_to_string(metrics.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(&hash)));
    assert_eq!(read_manifest(&ds).unwrap().config_hash.as_deref(), Some(ad_ck.meta.config_hash.as_str()));

    // Metrics recomputed from the exported label blocks.
    let head: HeadSpec = serde_json::from_value(doc["head"].clone()).unwrap();
    let data = Dataset::load(&ds).unwrap();
    let labels: Vec<Labels> = (0..data.tiles.len())
        .map(|i| load_tile(&preds.join(format!("tile_{i:06}.bin"))).unwrap().labels.unwrap())
        .collect();
    let again = score(&head, &data, &labels).unwrap();
    let stored: Metrics = serde_json::from_value(doc["metrics"].clone()).unwrap();
    for (a, b) in [
        (again.overall_accuracy, stored.overall_accuracy),
        (again.miou, stored.miou),
        (again.macro_f1, stored.macro_f1),
        (again.weighted_f1, stored.weighted_f1),
    ] {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn scratch_classification_without_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let mut c = toy_config(6);
    c["task"] = json!({"task": "classify", "epochs": 1, "lr": 0.01});
    let cfg = write_config(tmp.path(), "c.json", c);
    let ds = tmp.path().join("d");
    ok(&anysat(&["synth-data", "--config", p(&cfg), "--out", p(&ds)]));
    let ad = tmp.path().join("ad.ck");
    ok(&anysat(&["adapt", "--mode", "scratch", "--config", p(&cfg), "--data", p(&ds), "--out", p(&ad)]));
    assert_eq!(Checkpoint::load(&ad).unwrap().meta.backbone_pretrained, Some(false));
    let out = anysat(&["adapt", "--mode", "probe", "--config", p(&cfg), "--data", p(&ds), "--out", p(&ad)]);
    assert_eq!(code(&out), 2);
    let out = anysat(&["eval", "--ckpt", p(&ad), "--data", p(&ds), "--metrics", p(&tmp.path().join("m.json"))]);
    ok(&out);
}

#[test]
fn eval_rejects_pretraining_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", toy_config(4));
    let ds = tmp.path().join("d");
    ok(&anysat(&["synth-data", "--config", p(&cfg), "--out", p(&ds)]));
    let pre = tmp.path().join("pre.ck");
    ok(&anysat(&["pretrain", "--config", p(&cfg), "--data", p(&ds), "--steps", "1", "--out", p(&pre)]));
    let out = anysat(&["eval", "--ckpt", p(&pre), "--data", p(&ds), "--metrics", p(&tmp.path().join("m.json"))]);
    assert_eq!(code(&out), 2);
}
