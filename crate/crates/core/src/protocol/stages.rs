use std::path::PathBuf;
use std::thread;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{
    sub_seed, FreezeGuard, Method, PrototypeUpdate, RunLog, RunReport, RunState, SeedTag,
    Stage2Start, StageTiming, StrategyConfig,
};
use crate::data::{Task, TaskStream, TimeSeriesSample};
use crate::dcn::{gather_rows, DriftCompensator};
use crate::error::{contract, Result};
use crate::model::{loss_ce_unified, loss_cos, loss_cos_global, loss_dc, loss_kd, HeadBank, ModelState};
use crate::prototypes::{compute_prototypes, prototype_distance, sample_features, PrototypeStore};
use crate::tensor::{onecycle_lr, Graph, Sgd, SgdConfig, Tensor};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Writes the prototype store after every task when set.
    pub prototype_dir: Option<PathBuf>,
}

/// One grid point of an adapter-scale × distillation-weight sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub s: f32,
    pub alpha: f32,
    pub report: RunReport,
}

fn backbone_sections(m: &ModelState) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = m
        .backbone
        .tensors()
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("backbone.{i}"), t))
        .collect();
    if let Some(map) = &m.feature_map {
        out.push(("feature_map".into(), map));
    }
    out
}

fn adapter_sections(m: &ModelState) -> Vec<(String, &Tensor)> {
    m.adapters
        .iter()
        .enumerate()
        .flat_map(|(i, a)| [(format!("adapter.{i}.down"), &a.down), (format!("adapter.{i}.up"), &a.up)])
        .collect()
}

fn head_sections(m: &ModelState, keep: impl Fn(usize) -> bool) -> Vec<(String, &Tensor)> {
    m.heads
        .heads
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, h)| (format!("head.task{}", h.task), &h.weights))
        .collect()
}

fn stage1_sections<'a>(m: &'a ModelState, trainable_head: &dyn Fn(usize) -> bool) -> Vec<(String, &'a Tensor)> {
    let mut out = backbone_sections(m);
    out.extend(head_sections(m, |i| !trainable_head(i)));
    out
}

fn stage3_sections<'a>(m: &'a ModelState, dcn: &'a DriftCompensator) -> Vec<(String, &'a Tensor)> {
    let mut out = backbone_sections(m);
    out.extend(adapter_sections(m));
    out.push(("dcn".into(), &dcn.weight));
    out
}

fn all_sections(m: &ModelState) -> Vec<(String, &Tensor)> {
    let mut out = backbone_sections(m);
    out.extend(adapter_sections(m));
    out.extend(head_sections(m, |_| true));
    out
}

/// Runs the three stages for `tasks[index]`; `tasks[..index]` are consulted
/// only to measure prototype drift, never for training.
pub fn run_task(
    state: &mut RunState,
    tasks: &[Task],
    index: usize,
    cfg: &StrategyConfig,
    log: &mut RunLog,
) -> Result<StageTiming> {
    let Some(task) = tasks.get(index) else {
        return contract(format!("task index {index} outside stream of {}", tasks.len()));
    };
    if task.train.is_empty() {
        return contract(format!("task {} has no training samples", task.id));
    }
    let seen = state.model.heads.seen_classes();
    if let Some(c) = task.classes.iter().find(|c| seen.contains(c)) {
        return contract(format!("class {c} of task {} was already learned", task.id));
    }
    if state.old_model.is_some() != (state.tasks_done > 0) {
        return contract("previous model must exist exactly when a task has been trained");
    }
    let plan = cfg.method.plan();
    let t = task.id;
    let dim = state.model.embed_dim();
    let mut timing = StageTiming {
        task: t,
        ..StageTiming::default()
    };

    state.dcn = DriftCompensator::new(dim);
    if state.old_model.is_some() {
        if let Some(map) = cfg.induced_drift.map(dim, state.seed, t) {
            state.model.compose_feature_map(&map)?;
            log.push("induced_drift", json!({"task": t}));
        }
    }

    let clock = Instant::now();
    stage1(state, task, cfg, log)?;
    timing.stage1 = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    if let (Some(start), Some(old)) = (plan.stage2, &state.old_model) {
        if start == Stage2Start::Identity {
            state.dcn = DriftCompensator::new(dim);
        }
        let new = state.model.snapshot();
        let guard = FreezeGuard::capture("stage 2", all_sections(&state.model));
        let old_guard = FreezeGuard::capture("stage 2 (previous model)", all_sections(old.model()));
        let report = state.dcn.train_stage2(
            old,
            &new,
            &task.train,
            &cfg.train.sgd(cfg.train.epochs_s2),
            sub_seed(state.seed, SeedTag::Stage2, t),
        )?;
        verify_frozen(&guard, all_sections(&state.model), t, &mut state.freeze_checks, log)?;
        verify_frozen(&old_guard, all_sections(old.model()), t, &mut state.freeze_checks, log)?;
        for (epoch, l) in report.epoch_losses.iter().enumerate() {
            log.push("stage_loss", json!({"task": t, "stage": 2, "epoch": epoch + 1, "dc": l}));
        }
        log.push(
            "dcn_fit",
            json!({"task": t, "loss_before": report.loss_before, "loss_after": report.loss_after}),
        );
    }
    if state.old_model.is_some() && cfg.method.trains_dcn() {
        state.dcn_trainings += 1;
    }
    timing.stage2 = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    stage3(state, tasks, index, cfg, log)?;
    timing.stage3 = clock.elapsed().as_secs_f64();

    state.model.set_trainable(false);
    state.old_model = Some(state.model.snapshot());
    state.tasks_done += 1;
    Ok(timing)
}

fn stage1(state: &mut RunState, task: &Task, cfg: &StrategyConfig, log: &mut RunLog) -> Result<()> {
    let plan = cfg.method.plan();
    let t = task.id;
    let dim = state.model.embed_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(state.seed, SeedTag::Head, t));
    state.model.heads.add_head(t, &task.classes, dim, &mut rng)?;
    let current = state.model.heads.heads.len() - 1;
    let trainable_head = |i: usize| !plan.local_heads || i == current;

    state.model.set_trainable(true);
    for (i, h) in state.model.heads.heads.iter_mut().enumerate() {
        h.weights.set_requires_grad(trainable_head(i));
    }
    let old = state.old_model.as_ref();
    let alpha = cfg.train.alpha;
    let beta = cfg.train.beta;
    let use_kd = plan.distill && old.is_some() && alpha > 0.0;
    let use_dc = plan.dc_in_stage1 && old.is_some() && beta > 0.0;
    state.dcn.weight.set_requires_grad(use_dc);
    let old_features = match old {
        Some(o) if use_kd || use_dc => Some(o.features(&task.train)?),
        _ => None,
    };

    let guard = FreezeGuard::capture("stage 1", stage1_sections(&state.model, &trainable_head));

    let sgd = cfg.train.sgd(cfg.train.epochs_s1);
    let n = task.train.len();
    let total_steps = n.div_ceil(sgd.batch_size) * sgd.epochs_per_stage;
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(sub_seed(state.seed, SeedTag::Stage1, t));
    let mut opt = Sgd::new(sgd.momentum);
    let mut step = 0;
    for epoch in 0..sgd.epochs_per_stage {
        order.shuffle(&mut shuffle);
        let mut sums = [0.0f64; 4];
        for batch in order.chunks(sgd.batch_size) {
            let samples: Vec<&TimeSeriesSample> = batch.iter().map(|&i| &task.train[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let mut g = Graph::new();
            let vars = state.model.register(&mut g);
            let f = state.model.forward(&mut g, &vars, &samples)?;
            let cos = if plan.local_heads {
                loss_cos(&mut g, f, &vars.heads, &state.model.heads, &labels, t)?
            } else {
                loss_cos_global(&mut g, f, &vars.heads, &state.model.heads, &labels)?
            };
            let mut total = cos;
            let mut parts = [g.data(cos)[0], 0.0, 0.0];
            let old_batch = match &old_features {
                Some(of) => Some(g.constant(&gather_rows(of, batch)?)),
                None => None,
            };
            if let (true, Some(o)) = (use_kd, old_batch) {
                let kd = loss_kd(&mut g, o, f)?;
                parts[1] = g.data(kd)[0];
                let weighted = g.scale(kd, alpha);
                total = g.add(total, weighted)?;
            }
            let mut params = vars.adapter_params();
            params.extend(
                vars.heads
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| trainable_head(*i))
                    .map(|(_, &v)| v),
            );
            if let (true, Some(o)) = (use_dc, old_batch) {
                let w = g.leaf(&state.dcn.weight);
                let dc = loss_dc(&mut g, w, o, f)?;
                parts[2] = g.data(dc)[0];
                let weighted = g.scale(dc, beta);
                total = g.add(total, weighted)?;
                params.push(w);
            }
            let grads = g.grad(total, &params)?;
            let weight = batch.len() as f64;
            sums[0] += g.data(total)[0] as f64 * weight;
            for (s, p) in sums[1..].iter_mut().zip(parts) {
                *s += p as f64 * weight;
            }
            drop(g);

            let lr = onecycle_lr(step, total_steps, sgd.max_lr)?;
            let mut refs: Vec<&mut Tensor> = Vec::with_capacity(params.len());
            for a in state.model.adapters.iter_mut() {
                refs.push(&mut a.down);
                refs.push(&mut a.up);
            }
            for (i, h) in state.model.heads.heads.iter_mut().enumerate() {
                if trainable_head(i) {
                    refs.push(&mut h.weights);
                }
            }
            if use_dc {
                refs.push(&mut state.dcn.weight);
            }
            opt.step(&mut refs, &grads, lr)?;
            step += 1;
        }
        let n = n as f64;
        log.push(
            "stage_loss",
            json!({
                "task": t, "stage": 1, "epoch": epoch + 1,
                "total": sums[0] / n, "cos": sums[1] / n, "kd": sums[2] / n, "dc": sums[3] / n,
            }),
        );
    }
    verify_frozen(
        &guard,
        stage1_sections(&state.model, &trainable_head),
        t,
        &mut state.freeze_checks,
        log,
    )?;
    state.model.set_trainable(false);
    state.dcn.weight.set_requires_grad(false);
    Ok(())
}

fn stage3(
    state: &mut RunState,
    tasks: &[Task],
    index: usize,
    cfg: &StrategyConfig,
    log: &mut RunLog,
) -> Result<()> {
    let plan = cfg.method.plan();
    let task = &tasks[index];
    let t = task.id;
    let new = state.model.snapshot();
    let guard = FreezeGuard::capture("stage 3", stage3_sections(&state.model, &state.dcn));

    if let Some(old) = &state.old_model {
        match plan.update {
            PrototypeUpdate::Keep => {}
            PrototypeUpdate::Dcn => state.store.update_with_dcn(&state.dcn)?,
            PrototypeUpdate::Sdc => {
                let report = state.store.sdc_update(old, &new, &task.train, None)?;
                log.push(
                    "sdc_update",
                    json!({"task": t, "sigma": report.sigma, "fallback_classes": report.fallback_classes}),
                );
            }
        }
    }
    let old_classes = state.store.classes();
    state.store.extend(compute_prototypes(&new, &task.train, t)?)?;

    if index > 0 {
        let d = measure_drift(&state.store, &new, &tasks[..index], &old_classes)?;
        state.drift.push((t, d));
        log.push("prototype_distance", json!({"task": t, "D": d}));
    }

    if plan.unified_retrain {
        if cfg.train.reinit_heads {
            reinit_heads(&mut state.model.heads, sub_seed(state.seed, SeedTag::Reinit, t));
        }
        let losses = retrain_unified(
            &mut state.model.heads,
            &state.store,
            cfg.train.s_n,
            &cfg.train.sgd(cfg.train.epochs_s3),
            sub_seed(state.seed, SeedTag::Sampling, t),
        )?;
        for (epoch, l) in losses.iter().enumerate() {
            log.push("stage_loss", json!({"task": t, "stage": 3, "epoch": epoch + 1, "ce": l}));
        }
    }
    verify_frozen(
        &guard,
        stage3_sections(&state.model, &state.dcn),
        t,
        &mut state.freeze_checks,
        log,
    )?;
    Ok(())
}

/// Verifies a freeze guard and records the check.
fn verify_frozen<'a>(
    guard: &FreezeGuard,
    sections: impl IntoIterator<Item = (String, &'a Tensor)>,
    task: usize,
    checks: &mut usize,
    log: &mut RunLog,
) -> Result<()> {
    guard.verify(sections)?;
    *checks += 1;
    log.push(
        "freeze_check",
        json!({"task": task, "phase": guard.phase(), "sections": guard.len()}),
    );
    Ok(())
}

/// `D^t` between the stored old-class prototypes and ones recomputed under
/// the current model. This is the only place earlier tasks' data is read.
fn measure_drift(
    store: &PrototypeStore,
    model: &crate::model::FrozenModel,
    earlier: &[Task],
    old_classes: &[usize],
) -> Result<f64> {
    let mut real = PrototypeStore::new();
    for task in earlier {
        real.extend(compute_prototypes(model, &task.train, task.id)?)?;
    }
    prototype_distance(&store.subset(old_classes), &real)
}

fn reinit_heads(bank: &mut HeadBank, seed: u64) {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for h in &mut bank.heads {
        let dim = h.weights.cols();
        let normal = Normal::new(0.0f32, (1.0 / dim as f32).sqrt()).expect("valid std");
        for w in h.weights.data_mut() {
            *w = normal.sample(&mut rng);
        }
    }
}

/// Retrains every head on `s_n` features sampled per stored class, starting
/// from the current weights. Returns the mean loss of every epoch.
pub fn retrain_unified(
    bank: &mut HeadBank,
    store: &PrototypeStore,
    s_n: usize,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<Vec<f32>> {
    cfg.validate()?;
    if store.is_empty() {
        return contract("unified retraining needs at least one stored prototype");
    }
    if s_n == 0 {
        return contract("unified retraining needs S_n >= 1 samples per class");
    }
    if store.classes() != bank.seen_classes() {
        return contract(format!(
            "prototype store covers {:?} but the head bank has {:?}",
            store.classes(),
            bank.seen_classes()
        ));
    }
    let dim = store.iter().next().expect("non-empty").dim();
    let mut data = Vec::with_capacity(store.len() * s_n * dim);
    let mut labels = Vec::with_capacity(store.len() * s_n);
    for p in store.iter() {
        let s = sample_features(p, s_n, sub_seed(seed, SeedTag::Sampling, p.class))?;
        data.extend_from_slice(s.data());
        labels.extend(std::iter::repeat_n(p.class, s_n));
    }
    let features = Tensor::new(vec![labels.len(), dim], data)?;

    for h in &mut bank.heads {
        h.weights.set_requires_grad(true);
    }
    let n = labels.len();
    let total_steps = n.div_ceil(cfg.batch_size) * cfg.epochs_per_stage;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, SeedTag::Stage3, 0));
    let mut opt = Sgd::new(cfg.momentum);
    let mut losses = Vec::with_capacity(cfg.epochs_per_stage);
    let mut step = 0;
    for _ in 0..cfg.epochs_per_stage {
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let heads: Vec<_> = bank.heads.iter().map(|h| g.leaf(&h.weights)).collect();
            let f = g.constant(&gather_rows(&features, batch)?);
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let l = loss_ce_unified(&mut g, f, &heads, bank, &batch_labels)?;
            sum += g.data(l)[0] as f64 * batch.len() as f64;
            let grads = g.grad(l, &heads)?;
            drop(g);
            let lr = onecycle_lr(step, total_steps, cfg.max_lr)?;
            let mut refs: Vec<&mut Tensor> = bank.heads.iter_mut().map(|h| &mut h.weights).collect();
            opt.step(&mut refs, &grads, lr)?;
            step += 1;
        }
        losses.push((sum / n as f64) as f32);
    }
    for h in &mut bank.heads {
        h.weights.set_requires_grad(false);
    }
    Ok(losses)
}

pub fn run_stream(stream: &TaskStream, cfg: &StrategyConfig, seed: u64) -> Result<RunReport> {
    run_stream_with(stream, cfg, seed, &RunOptions::default())
}

/// Trains on every task in order; after task `t` row `t` of the accuracy
/// matrix holds test accuracy on tasks `1..=t`.
pub fn run_stream_with(
    stream: &TaskStream,
    cfg: &StrategyConfig,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunReport> {
    stream.validate()?;
    let Some(first) = stream.tasks.first().and_then(|t| t.train.first()) else {
        return contract("stream has no training data");
    };
    let mut state = RunState::new(cfg, first.channels(), first.length(), seed)?;
    let mut log = RunLog::new();
    let mut timings = Vec::with_capacity(stream.tasks.len());
    log.push(
        "run_start",
        json!({"method": cfg.method.name(), "seed": seed, "tasks": stream.tasks.len()}),
    );
    for (index, task) in stream.tasks.iter().enumerate() {
        log.push("task_start", json!({"task": task.id, "classes": task.classes}));
        let mut timing = run_task(&mut state, &stream.tasks, index, cfg, &mut log)?;
        let clock = Instant::now();
        let row = stream.tasks[..=index]
            .iter()
            .map(|tk| state.model.accuracy(&tk.test))
            .collect::<Result<Vec<f64>>>()?;
        state.accuracy.push_row(row.clone())?;
        timing.evaluation = clock.elapsed().as_secs_f64();
        if let Some(dir) = &opts.prototype_dir {
            state.store.dump(dir, task.id)?;
        }
        log.push(
            "task_end",
            json!({
                "task": task.id,
                "accuracy": row,
                "A_i": state.accuracy.avg_accuracy(index + 1)?,
                "seen_classes": state.model.heads.seen_classes().len(),
                "prototypes": state.store.len(),
            }),
        );
        timings.push(timing);
    }
    let summary = state.accuracy.summary()?;
    log.push("run_end", serde_json::to_value(&summary)?);
    Ok(RunReport {
        config: cfg.clone(),
        seed,
        accuracy: state.accuracy,
        summary,
        drift: state.drift,
        dcn_trainings: state.dcn_trainings,
        freeze_checks: state.freeze_checks,
        timings,
        log,
    })
}

/// One run per `(s, α)` grid point, all on the same stream and seed.
pub fn sweep(
    stream: &TaskStream,
    base: &StrategyConfig,
    grid: &[(f32, f32)],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return contract("sweep grid is empty");
    }
    let results: Vec<Result<SweepPoint>> = thread::scope(|scope| {
        let handles: Vec<_> = grid
            .iter()
            .map(|&(s, alpha)| {
                scope.spawn(move || {
                    let mut cfg = base.clone();
                    cfg.model.s = s;
                    cfg.train.alpha = alpha;
                    run_stream(stream, &cfg, seed).map(|report| SweepPoint { s, alpha, report })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    results.into_iter().collect()
}

/// Every method on the same stream and seed, in parallel.
pub fn run_methods(
    stream: &TaskStream,
    base: &StrategyConfig,
    methods: &[Method],
    seed: u64,
) -> Result<Vec<RunReport>> {
    let results: Vec<Result<RunReport>> = thread::scope(|scope| {
        let handles: Vec<_> = methods
            .iter()
            .map(|&m| {
                scope.spawn(move || {
                    let mut cfg = base.clone();
                    cfg.method = m;
                    run_stream(stream, &cfg, seed)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run worker panicked"))
            .collect()
    });
    results.into_iter().collect()
}
