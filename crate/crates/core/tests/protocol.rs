mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tscil::model::HeadBank;
use tscil::prototypes::{sample_features, ClassPrototype, PrototypeStore};
use tscil::protocol::{
    retrain_unified, run_methods, run_stream, run_task, sweep, FreezeGuard, Method, RunLog,
    RunState,
};
use tscil::tensor::{SgdConfig, Tensor};

fn point_cloud_proto(class: usize, mean: Vec<f32>, var: f32) -> ClassPrototype {
    let d = mean.len();
    ClassPrototype {
        class,
        mean,
        cov: Tensor::from_fn(&[d, d], |i| if i / d == i % d { var } else { 0.0 }),
        task_of_origin: 1,
    }
}

fn retrain_cfg() -> SgdConfig {
    SgdConfig {
        max_lr: 0.05,
        batch_size: 16,
        epochs_per_stage: 10,
        momentum: 0.9,
    }
}

fn bank_for(tasks: &[&[usize]], dim: usize) -> HeadBank {
    let mut bank = HeadBank::new(16.0, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (t, classes) in tasks.iter().enumerate() {
        bank.add_head(t + 1, classes, dim, &mut rng).unwrap();
    }
    bank
}

fn bank_accuracy(bank: &HeadBank, store: &PrototypeStore, n: usize, seed: u64) -> f64 {
    let mut correct = 0;
    let mut total = 0;
    for p in store.iter() {
        let s = sample_features(p, n, seed + p.class as u64).unwrap();
        for i in 0..n {
            correct += usize::from(bank.predict_feature(s.row(i)).unwrap() == p.class);
            total += 1;
        }
    }
    correct as f64 / total as f64
}

#[test]
fn first_task_stores_its_classes() {
    let stream = synthetic_stream(4, 2, 32, 20, 0.1, 1);
    let cfg = quick_config(Method::Full);
    let mut state = RunState::new(&cfg, 2, 32, 1).unwrap();
    let mut log = RunLog::new();
    run_task(&mut state, &stream.tasks, 0, &cfg, &mut log).unwrap();
    assert_eq!(state.store.classes(), stream.tasks[0].classes);
    assert_eq!(state.model.heads.seen_classes(), stream.tasks[0].classes);
    assert_eq!(state.dcn_trainings, 0);
    assert!(state.drift.is_empty());
    assert!(state.old_model.is_some());
    assert!(state.freeze_checks > 0);
    assert_eq!(state.tasks_done, 1);
}

#[test]
fn tasks_must_run_in_order() {
    let stream = synthetic_stream(4, 2, 32, 20, 0.1, 1);
    let cfg = quick_config(Method::Full);
    let mut state = RunState::new(&cfg, 2, 32, 1).unwrap();
    assert!(run_task(&mut state, &stream.tasks, 1, &cfg, &mut RunLog::new()).is_err());
}

#[test]
fn full_stream_covers_every_class() {
    let stream = synthetic_stream(8, 2, 32, 20, 0.1, 2);
    let reports = run_methods(
        &stream,
        &quick_config(Method::Full),
        &[Method::Full, Method::Sdc, Method::DefaultNoUpdate, Method::Finetune],
        2,
    )
    .unwrap();
    for r in &reports {
        assert_eq!(r.accuracy.tasks(), 4);
        assert_eq!(r.drift.iter().map(|d| d.0).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert!(r.summary.f_t.is_some());
        assert_eq!(r.log.count("task_end"), 4);
        let last = r.log.events().iter().rev().find(|e| e.event == "task_end").unwrap();
        assert_eq!(last.fields["prototypes"], 8);
        assert_eq!(last.fields["seen_classes"], 8);
    }
    let trainings: Vec<usize> = reports.iter().map(|r| r.dcn_trainings).collect();
    assert_eq!(trainings, vec![3, 0, 3, 0]);
    for r in &reports {
        assert_eq!(r.dcn_trainings > 0, r.config.method.trains_dcn());
    }
    let checks: Vec<usize> = reports.iter().map(|r| r.freeze_checks).collect();
    assert!(checks.iter().all(|&c| c >= 4 * 2), "{checks:?}");
}

#[test]
fn single_task_stream_has_no_forgetting() {
    let stream = synthetic_stream(4, 2, 32, 20, 0.1, 3).truncated(1);
    let r = run_stream(&stream, &quick_config(Method::Full), 3).unwrap();
    assert_eq!(r.accuracy.tasks(), 1);
    assert_eq!(r.summary.f_t, None);
    assert!(r.drift.is_empty());
}

#[test]
fn runs_are_deterministic() {
    let stream = synthetic_stream(4, 2, 32, 20, 0.2, 4);
    let mut cfg = quick_config(Method::Full);
    cfg.induced_drift = tscil::protocol::InducedDrift::Linear { strength: 0.5 };
    let a = run_stream(&stream, &cfg, 4).unwrap();
    let b = run_stream(&stream, &cfg, 4).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.drift, b.drift);
    assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    let c = run_stream(&stream, &cfg, 5).unwrap();
    assert_ne!(a.drift, c.drift);
}

#[test]
fn repeated_class_is_rejected() {
    let mut stream = synthetic_stream(4, 2, 32, 20, 0.1, 5);
    let first = stream.tasks[0].clone();
    stream.tasks[1] = tscil::data::Task { id: 2, ..first };
    assert!(run_stream(&stream, &quick_config(Method::Full), 5).is_err());
}

#[test]
fn inert_adapters_make_distillation_weight_irrelevant() {
    let stream = synthetic_stream(4, 2, 32, 20, 0.1, 6);
    let mut base = quick_config(Method::Full);
    base.model.s = 0.0;
    let points = sweep(&stream, &base, &[(0.0, 0.0), (0.0, 0.1), (0.0, 10.0)], 6).unwrap();
    for p in &points[1..] {
        assert_eq!(p.report.accuracy, points[0].report.accuracy, "alpha {}", p.alpha);
    }
}

#[test]
fn sweep_point_equals_plain_run() {
    let stream = synthetic_stream(4, 2, 32, 20, 0.1, 7);
    let base = quick_config(Method::Full);
    let (s, alpha) = (base.model.s, base.train.alpha);
    let points = sweep(&stream, &base, &[(s, alpha)], 7).unwrap();
    let plain = run_stream(&stream, &base, 7).unwrap();
    assert_eq!(points[0].report.accuracy, plain.accuracy);
    assert!(sweep(&stream, &base, &[], 7).is_err());
}

#[test]
fn retrain_single_class_is_perfect() {
    let mut store = PrototypeStore::new();
    store.insert(point_cloud_proto(3, vec![1.0, 0.0, 0.5], 0.1)).unwrap();
    let mut bank = bank_for(&[&[3]], 3);
    retrain_unified(&mut bank, &store, 16, &retrain_cfg(), 0).unwrap();
    assert_eq!(bank_accuracy(&bank, &store, 50, 9), 1.0);
}

#[test]
fn retrain_separates_distant_prototypes() {
    let dim = 8;
    let mut store = PrototypeStore::new();
    for c in 0..4 {
        let mean: Vec<f32> = (0..dim).map(|j| if j == c { 4.0 } else { 0.0 }).collect();
        store.insert(point_cloud_proto(c, mean, 0.05)).unwrap();
    }
    let mut bank = bank_for(&[&[0, 1], &[2, 3]], dim);
    let losses = retrain_unified(&mut bank, &store, 64, &retrain_cfg(), 1).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);
    let acc = bank_accuracy(&bank, &store, 200, 10);
    assert!(acc >= 0.99, "accuracy {acc}");
    assert!(bank.heads.iter().all(|h| !h.weights.requires_grad()));
}

#[test]
fn retrain_rejects_bad_inputs() {
    let mut store = PrototypeStore::new();
    store.insert(point_cloud_proto(0, vec![1.0, 0.0], 0.1)).unwrap();
    let mut bank = bank_for(&[&[0]], 2);
    assert!(retrain_unified(&mut bank, &store, 0, &retrain_cfg(), 0).is_err());
    assert!(retrain_unified(&mut bank, &PrototypeStore::new(), 8, &retrain_cfg(), 0).is_err());
    let mut wider = bank_for(&[&[0, 1]], 2);
    assert!(retrain_unified(&mut wider, &store, 8, &retrain_cfg(), 0).is_err());
}

#[test]
fn retrain_is_seeded() {
    let mut store = PrototypeStore::new();
    store.insert(point_cloud_proto(0, vec![1.0, 0.0], 0.3)).unwrap();
    store.insert(point_cloud_proto(1, vec![0.0, 1.0], 0.3)).unwrap();
    let run = |seed| {
        let mut bank = bank_for(&[&[0, 1]], 2);
        retrain_unified(&mut bank, &store, 16, &retrain_cfg(), seed).unwrap();
        bank
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn freeze_guard_names_changed_section() {
    let a = Tensor::from_fn(&[2, 2], |i| i as f32);
    let mut b = a.clone();
    let guard = FreezeGuard::capture("stage", [("w".to_string(), &a)]);
    guard.verify([("w".to_string(), &b)]).unwrap();
    b.data_mut()[3] = f32::from_bits(b.data()[3].to_bits() + 1);
    let err = guard.verify([("w".to_string(), &b)]).unwrap_err().to_string();
    assert!(err.contains("stage") && err.contains('w'), "{err}");
}
