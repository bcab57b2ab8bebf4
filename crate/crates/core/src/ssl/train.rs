use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::OptimConfig;
use crate::data::{sample_step, Dataset, TileSample, ValidatedDataset};
use crate::error::{Error, Result};
use crate::geometry::TileGeometry;
use crate::model::{init_seeded, projector_shapes, teacher_from, ModelConfig};
use crate::numerics::{clip_grad_norm, Gradients, Graph, LrSchedule, LrScheduler, OptimizerState, ParamStore, SchedulerState, Tensor, Var};

use super::forward::{student_forward, teacher_forward};
use super::loss::{contrastive_loss, jepa_loss};
use super::mask::{expected_drop_rate, sample_mask_plan, DropMode, MaskPlan};
use super::SslConfig;

/// Loss values of one tile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileLoss {
    pub l_jepa: f64,
    /// `None` when the contrastive term is disabled or inapplicable.
    pub l_con: Option<f64>,
    pub total: f64,
    pub dropped: usize,
    pub masked: usize,
}

/// One line of the loss trace: batch means of the per-tile losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub dataset: String,
    #[serde(rename = "P")]
    pub patch_size: f64,
    pub l_jepa: f64,
    pub l_con: Option<f64>,
    pub total: f64,
    pub lr: f64,
    /// Mean number of dropped patches per tile.
    pub dropped: f64,
    /// Mean number of masked tokens per tile.
    pub masked: f64,
}

/// Builds the total loss of one tile on a student graph.
#[allow(clippy::too_many_arguments)]
pub fn tile_loss(
    g: &mut Graph,
    model: &ModelConfig,
    ssl: &SslConfig,
    ds: &ValidatedDataset,
    tile: &TileSample,
    patch_size: f64,
    plan: &MaskPlan,
    target: &Tensor,
) -> Result<(Var, TileLoss)> {
    let out = student_forward(g, model, ds, tile, patch_size, plan)?;
    let lj = jepa_loss(g, out.predictions, target, &plan.dropped)?;
    let weight = ssl.effective_contrastive_weight();
    let con = if weight > 0.0 && out.unimodal.len() >= 2 && out.map.geometry.total() >= 2 {
        let u: Vec<Var> = out.unimodal.iter().map(|(_, v)| *v).collect();
        Some(contrastive_loss(g, &u, ssl.temperature)?)
    } else {
        None
    };
    let root = match con {
        Some(c) => {
            let wc = g.scale(c, weight)?;
            g.add(lj, wc)?
        }
        None => lj,
    };
    let loss = TileLoss {
        l_jepa: g.value(lj).item(),
        l_con: con.map(|c| g.value(c).item()),
        total: g.value(root).item(),
        dropped: plan.dropped.len(),
        masked: plan.masked.len(),
    };
    Ok((root, loss))
}

/// `θ_T ← m·θ_T + (1−m)·θ_S` for every teacher parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    for t in teacher.iter_mut() {
        let s = student.by_name(&t.name).map_err(|_| Error::TreeMismatch(format!("student has no `{}`", t.name)))?;
        if s.value.shape() != t.value.shape() {
            return Err(Error::TreeMismatch(format!(
                "`{}` has shape {:?} vs {:?}",
                t.name,
                t.value.shape(),
                s.value.shape()
            )));
        }
        for (a, &b) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// Everything that evolves during pretraining.
#[derive(Clone, Debug)]
pub struct PretrainState {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub optimizer: OptimizerState,
    pub scheduler: Option<SchedulerState>,
    /// Next step to run.
    pub step: usize,
    /// Losses of the current plateau window.
    pub window: Vec<f64>,
}

/// RNG of step `step`: one stream per step of the seed's generator.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

impl PretrainState {
    /// Fresh student covering every modality of `datasets` and a teacher copy.
    pub fn init(model: &ModelConfig, datasets: &[Dataset], optim: &OptimConfig, seed: u64) -> Result<Self> {
        let shapes = projector_shapes(model, datasets.iter().flat_map(|d| d.info.modalities.iter()))?;
        let student = init_seeded(model, &shapes, seed)?;
        let teacher = teacher_from(&student);
        Ok(PretrainState {
            student,
            teacher,
            optimizer: OptimizerState::new(optim.adamw()),
            scheduler: None,
            step: 0,
            window: Vec::new(),
        })
    }
}

fn check_finite(loss: &TileLoss, step: usize, ds: &str, patch: f64) -> Result<()> {
    if loss.total.is_finite() && loss.l_jepa.is_finite() && loss.l_con.is_none_or(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step, dataset: ds.to_string(), patch })
    }
}

/// Runs `steps` pretraining steps from `state.step`, calling `on_step` after
/// each. Steps are fully determined by `seed` and the step index.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    datasets: &[Dataset],
    model: &ModelConfig,
    ssl: &SslConfig,
    optim: &OptimConfig,
    seed: u64,
    steps: usize,
    state: &mut PretrainState,
    mut on_step: impl FnMut(&StepRecord, &PretrainState) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    if steps == 0 {
        return Err(Error::Config("pretraining needs at least one step".into()));
    }
    model.validate()?;
    ssl.validate()?;
    optim.validate()?;
    let mut names: Vec<&str> = datasets.iter().map(Dataset::name).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("dataset names must be unique".into()));
    }
    let specs: Vec<_> = datasets.iter().map(|d| d.info.spec.clone()).collect();
    let schedule = optim.schedule.clone().unwrap_or(LrSchedule::Constant);
    let plateau = matches!(schedule, LrSchedule::ReduceOnPlateau { .. });
    let mut scheduler = LrScheduler::new(schedule, optim.lr)?;
    if let Some(s) = state.scheduler {
        scheduler.restore(s);
    }
    state.optimizer.config = optim.adamw();
    let mut drop_rates: HashMap<(usize, u64), f64> = HashMap::new();
    let mut records = Vec::with_capacity(steps);

    for step in state.step..state.step + steps {
        let mut rng = step_rng(seed, step);
        let draw = sample_step(&specs, &mut rng)?;
        let data = &datasets[draw.dataset];
        let info = &data.info;
        let p = draw.patch_size;
        let geom = TileGeometry::new(info.spec.tile_size, p)?;
        let mode = if ssl.ablation.random_drop {
            let rate = *drop_rates
                .entry((draw.dataset, p.to_bits()))
                .or_insert_with(|| expected_drop_rate(&geom, &ssl.mask));
            DropMode::Random(rate)
        } else {
            DropMode::Rectangles
        };
        let normal: Vec<String> = info.normal_modalities().map(|m| m.name.clone()).collect();
        let mut jobs = Vec::with_capacity(draw.tile_ids.len());
        for &id in &draw.tile_ids {
            let tile = data.tile(id)?;
            let timesteps: BTreeMap<String, usize> =
                tile.modalities.iter().filter(|(_, d)| d.timesteps() > 1).map(|(n, d)| (n.clone(), d.timesteps())).collect();
            let plan = sample_mask_plan(&geom, &normal, &timesteps, &ssl.mask, mode, &mut rng)?;
            jobs.push((tile, plan));
        }

        let student = &state.student;
        let teacher = &state.teacher;
        let run = |tile: &TileSample, plan: &MaskPlan| -> Result<(Gradients, TileLoss)> {
            let target = teacher_forward(teacher, model, info, tile, p)?;
            let mut g = Graph::new(student, true);
            let (root, loss) = tile_loss(&mut g, model, ssl, info, tile, p, plan, &target)?;
            check_finite(&loss, step, data.name(), p)?;
            Ok((g.backward(root)?, loss))
        };
        let results: Vec<Result<(Gradients, TileLoss)>> = jobs.par_iter().map(|(t, plan)| run(t, plan)).collect();

        let b = jobs.len() as f64;
        state.student.zero_grad();
        let (mut lj, mut lc, mut tot, mut nd, mut nm) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut has_con = true;
        for r in results {
            let (grads, loss) = r?;
            state.student.accumulate(&grads, 1.0 / b);
            lj += loss.l_jepa / b;
            tot += loss.total / b;
            nd += loss.dropped as f64 / b;
            nm += loss.masked as f64 / b;
            match loss.l_con {
                Some(c) => lc += c / b,
                None => has_con = false,
            }
        }
        if let Some(max) = optim.max_grad_norm {
            clip_grad_norm(&mut state.student, max);
        }
        let lr = if plateau {
            state.window.push(tot);
            if state.window.len() >= optim.plateau_window {
                let mean = state.window.iter().sum::<f64>() / state.window.len() as f64;
                state.window.clear();
                scheduler.lr(step, Some(mean))?
            } else {
                scheduler.current()
            }
        } else {
            scheduler.lr(step, None)?
        };
        state.optimizer.adamw_step(&mut state.student, lr)?;
        ema_update(&mut state.teacher, &state.student, ssl.ema_decay)?;
        state.step = step + 1;
        state.scheduler = Some(scheduler.state());

        let record = StepRecord {
            step,
            dataset: data.name().to_string(),
            patch_size: p,
            l_jepa: lj,
            l_con: has_con.then_some(lc),
            total: tot,
            lr,
            dropped: nd,
            masked: nm,
        };
        on_step(&record, state)?;
        records.push(record);
    }
    Ok(records)
}
