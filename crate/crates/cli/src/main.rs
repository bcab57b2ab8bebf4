use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use anysat_core::checkpoint::{backbone_hash, Checkpoint, CheckpointKind, CheckpointMeta, DType};
use anysat_core::config::{AdaptMode, DataEntry, RunConfig, TaskKind};
use anysat_core::data::{store_tile, synth_generate, validate_dataset_spec, Dataset, Registry, TileSample};
use anysat_core::heads::{adapt, evaluate, HeadSpec, Metrics};
use anysat_core::ssl::{pretrain, PretrainState, StepRecord};
use anysat_core::Error;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

const SEED_ENV: &str = "ANYSAT_SEED";

#[derive(Parser)]
#[command(name = "anysat", version, about = "Multimodal patch-based self-supervised pretraining on synthetic tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Ablation {
    RandomDrop,
    NoContrastive,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and persist the synthetic datasets of a config.
    SynthData {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; one sub-directory per dataset when there are several.
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pretraining over one or more dataset directories.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        steps: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        ablation: Vec<Ablation>,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Loss trace; defaults to the checkpoint path with a `.trace.jsonl` extension.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train a classification or segmentation head.
    Adapt {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long, value_enum)]
        task: Option<Task>,
        /// Pretraining checkpoint; optional in scratch mode.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Task and optimizer settings; taken from the checkpoint when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score an adapted checkpoint on a labelled dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// Per-class scores; defaults to the metrics path with a `.csv` extension.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Directory receiving one label-only tile file per prediction.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Scratch,
    Finetune,
    Probe,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Classify,
    Segment,
    Changedet,
}

impl From<Mode> for AdaptMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Scratch => AdaptMode::Scratch,
            Mode::Finetune => AdaptMode::Finetune,
            Mode::Probe => AdaptMode::Probe,
        }
    }
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Classify => TaskKind::Classify,
            Task::Segment => TaskKind::Segment,
            Task::Changedet => TaskKind::Changedet,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for configuration errors, 3 for numeric aborts, 4 for I/O.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::NonFinite(_) | Error::NonFiniteLoss { .. } => 3,
                Error::Io(_) | Error::CorruptHeader { .. } | Error::Format { .. } | Error::Json(_) => 4,
                e if e.is_config() => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::SynthData { config, out } => synth_data(&config, &out),
        Command::Pretrain { config, data, steps, out, ablation, resume, trace } => {
            let trace = trace.unwrap_or_else(|| out.with_extension("trace.jsonl"));
            pretrain_cmd(&config, &data, steps as usize, &out, &ablation, resume.as_deref(), &trace)
        }
        Command::Adapt { mode, task, ckpt, data, out, config } => {
            adapt_cmd(mode.map(Into::into), task.map(Into::into), ckpt.as_deref(), &data, &out, config.as_deref())
        }
        Command::Eval { ckpt, data, metrics, csv, predictions } => {
            let csv = csv.unwrap_or_else(|| metrics.with_extension("csv"));
            eval_cmd(&ckpt, &data, &metrics, &csv, predictions.as_deref())
        }
    }
}

/// Loads a config and applies the seed override from the environment.
fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.data.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
    }
    Ok(cfg)
}

fn synth_data(config: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    if cfg.data.datasets.is_empty() {
        return Err(Error::Config("config lists no datasets".into()).into());
    }
    let hash = cfg.hash();
    let single = cfg.data.datasets.len() == 1;
    for entry in &cfg.data.datasets {
        let (info, synthetic) = resolve_entry(entry, cfg.data.seed)?;
        let dir = if single { out.to_path_buf() } else { out.join(&info.spec.name) };
        let manifest = synth_generate(&info, &synthetic, &dir, Some(hash.clone()))
            .with_context(|| format!("writing dataset to {}", dir.display()))?;
        let mods: Vec<String> = manifest
            .modalities
            .iter()
            .map(|m| format!("{} ({} m, {} ch, T {}-{})", m.name, m.resolution, m.channels, m.t_range.0, m.t_range.1))
            .collect();
        println!(
            "{}: {} tiles of {} m, patch sizes {:?}, {} modalities: {} -> {}",
            manifest.spec.name,
            manifest.spec.num_tiles,
            manifest.spec.tile_size,
            manifest.spec.patch_sizes,
            mods.len(),
            mods.join(", "),
            dir.display()
        );
    }
    println!("config hash {hash}");
    Ok(())
}

/// Validated dataset and generator settings of one config entry. The
/// generator seed is the entry's seed offset by the run seed.
fn resolve_entry(entry: &DataEntry, seed: u64) -> anyhow::Result<(anysat_core::data::ValidatedDataset, anysat_core::data::SyntheticConfig)> {
    let preset = entry.resolve()?;
    let info = validate_dataset_spec(&preset.spec, &Registry::new(preset.modalities.iter().cloned())?)?;
    let mut synthetic = entry.synthetic.clone();
    synthetic.seed = synthetic.seed.wrapping_add(seed);
    Ok((info, synthetic))
}

fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

#[derive(Serialize)]
struct TraceLine<'a> {
    #[serde(flatten)]
    record: &'a StepRecord,
    config_hash: &'a str,
}

fn pretrain_cmd(
    config: &Path,
    dirs: &[PathBuf],
    steps: usize,
    out: &Path,
    ablations: &[Ablation],
    resume: Option<&Path>,
    trace: &Path,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config)?;
    for a in ablations {
        match a {
            Ablation::RandomDrop => cfg.ssl.ablation.random_drop = true,
            Ablation::NoContrastive => cfg.ssl.ablation.no_contrastive = true,
        }
    }
    cfg.validate()?;
    let hash = cfg.hash();
    let seed = cfg.data.seed;
    let datasets = dirs.iter().map(|d| load_dataset(d)).collect::<anyhow::Result<Vec<_>>>()?;

    let mut state = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.meta.config_hash != hash {
                eprintln!("warning: config hash {} differs from the checkpoint's {}", hash, ck.meta.config_hash);
            }
            if ck.meta.seed != seed {
                eprintln!("warning: seed {seed} differs from the checkpoint's {}", ck.meta.seed);
            }
            ck.pretrain_state()?
        }
        None => PretrainState::init(&cfg.model, &datasets, &cfg.optim, seed)?,
    };

    let file = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(trace)
        .with_context(|| format!("opening trace {}", trace.display()))?;
    let mut writer = BufWriter::new(file);
    let start = state.step;
    pretrain(&datasets, &cfg.model, &cfg.ssl, &cfg.optim, seed, steps, &mut state, |rec, _| {
        serde_json::to_writer(&mut writer, &TraceLine { record: rec, config_hash: &hash })?;
        writer.write_all(b"\n")?;
        Ok(())
    })?;
    writer.flush()?;

    let meta = CheckpointMeta {
        kind: CheckpointKind::Pretrain,
        config_hash: hash.clone(),
        config: cfg.clone(),
        step: 0,
        seed,
        param_counts: BTreeMap::new(),
        backbone_hash: String::new(),
        datasets: datasets.iter().map(|d| d.name().to_string()).collect(),
        optimizer_step: 0,
        scheduler: None,
        plateau_window: Vec::new(),
        head: None,
        backbone_pretrained: Some(true),
    };
    Checkpoint::from_pretrain(meta, &state, DType::F64)
        .save(out)
        .with_context(|| format!("writing checkpoint {}", out.display()))?;
    println!("steps {start}..{} -> {} (trace {}, config hash {hash})", state.step, out.display(), trace.display());
    Ok(())
}

fn adapt_cmd(
    mode: Option<AdaptMode>,
    task: Option<TaskKind>,
    ckpt: Option<&Path>,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
) -> anyhow::Result<()> {
    let source = ckpt.map(load_checkpoint).transpose()?;
    if let Some(ck) = &source {
        if ck.meta.kind != CheckpointKind::Pretrain {
            return Err(Error::Config(format!("{} is not a pretraining checkpoint", ckpt.expect("set").display())).into());
        }
    }
    let mut cfg = match (config, &source) {
        (Some(path), _) => load_config(path)?,
        (None, Some(ck)) => ck.meta.config.clone(),
        (None, None) => bail!(Error::Config("adapt needs --config or --ckpt".into())),
    };
    if let Some(m) = mode {
        cfg.task.mode = m;
    }
    if let Some(t) = task {
        cfg.task.task = t;
    }
    if let Some(ck) = &source {
        if ck.meta.config.model != cfg.model {
            eprintln!("warning: using the checkpoint's model section");
            cfg.model = ck.meta.config.model.clone();
        }
    }
    cfg.validate()?;
    let backbone = match (&source, cfg.task.mode) {
        (_, AdaptMode::Scratch) => None,
        (Some(ck), _) => Some(ck.backbone()?),
        (None, m) => bail!(Error::Config(format!("{m:?} mode needs a pretraining checkpoint"))),
    };
    let hash = cfg.hash();
    let seed = cfg.data.seed;
    let ds = load_dataset(data)?;
    let result = adapt(&ds, &cfg.model, backbone.as_ref(), &cfg.task, &cfg.optim, seed)?;
    for r in &result.history {
        eprintln!("epoch {} loss {:.6} lr {:.3e}", r.epoch, r.loss, r.lr);
    }
    let mut ck = Checkpoint {
        meta: CheckpointMeta {
            kind: CheckpointKind::Adapt,
            config_hash: hash.clone(),
            config: cfg,
            step: result.history.len(),
            seed,
            param_counts: BTreeMap::new(),
            backbone_hash: backbone_hash(&result.params),
            datasets: vec![ds.name().to_string()],
            optimizer_step: 0,
            scheduler: None,
            plateau_window: Vec::new(),
            head: Some(result.head.clone()),
            backbone_pretrained: Some(result.backbone_pretrained),
        },
        records: Vec::new(),
    };
    ck.add_store("model", &result.params, DType::F64);
    ck.save(out).with_context(|| format!("writing checkpoint {}", out.display()))?;
    println!("adapted {} head -> {} (backbone {}, config hash {hash})", task_name(&result.head), out.display(), ck.meta.backbone_hash);
    Ok(())
}

fn task_name(h: &HeadSpec) -> &'static str {
    match h.task {
        TaskKind::Classify => "classification",
        TaskKind::Segment => "segmentation",
        TaskKind::Changedet => "change-detection",
    }
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    config_hash: &'a str,
    dataset: &'a str,
    tiles: usize,
    head: &'a HeadSpec,
    metrics: &'a Metrics,
}

fn eval_cmd(ckpt: &Path, data: &Path, metrics: &Path, csv: &Path, predictions: Option<&Path>) -> anyhow::Result<()> {
    let ck = load_checkpoint(ckpt)?;
    if ck.meta.kind != CheckpointKind::Adapt {
        return Err(Error::Config(format!("{} is not an adapted checkpoint", ckpt.display())).into());
    }
    let head = ck.meta.head.clone().ok_or_else(|| Error::Head("checkpoint has no head description".into()))?;
    let params = ck.store("model")?;
    let ds = load_dataset(data)?;
    let hash = &ck.meta.config_hash;
    let ev = evaluate(&params, &ck.meta.config.model, &head, &ds)?;

    let doc = MetricsFile { config_hash: hash, dataset: ds.name(), tiles: ds.tiles.len(), head: &head, metrics: &ev.metrics };
    fs::write(metrics, serde_json::to_vec_pretty(&doc)?).with_context(|| format!("writing {}", metrics.display()))?;
    write_csv(csv, hash, &ev.metrics).with_context(|| format!("writing {}", csv.display()))?;

    if let Some(dir) = predictions {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (tile, labels) in ds.tiles.iter().zip(&ev.predictions) {
            let out = TileSample { dataset: tile.dataset.clone(), tile_id: tile.tile_id, modalities: BTreeMap::new(), labels: Some(labels.clone()) };
            store_tile(&dir.join(format!("tile_{:06}.bin", tile.tile_id)), &out)?;
        }
        let info = serde_json::json!({ "config_hash": hash, "dataset": ds.name(), "tiles": ds.tiles.len(), "head": head });
        fs::write(dir.join("predictions.json"), serde_json::to_vec_pretty(&info)?)?;
    }
    let m = &ev.metrics;
    println!(
        "{}: OA {:.4} mIoU {:.4} macro F1 {:.4} weighted F1 {:.4} (config hash {hash})",
        ds.name(),
        m.overall_accuracy,
        m.miou,
        m.macro_f1,
        m.weighted_f1
    );
    Ok(())
}

fn write_csv(path: &Path, hash: &str, m: &Metrics) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "class,f1,iou,support,config_hash")?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (k, ((f1, iou), s)) in m.per_class_f1.iter().zip(&m.per_class_iou).zip(&m.support).enumerate() {
        writeln!(w, "{k},{},{},{s},{hash}", fmt(*f1), fmt(*iou))?;
    }
    w.flush()?;
    Ok(())
}
