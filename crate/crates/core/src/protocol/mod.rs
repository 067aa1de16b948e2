//! Per-task training procedure over a task stream, with every ablation and
//! baseline strategy expressed as a [`Method`].

mod freeze;
mod runlog;
mod stages;

pub use freeze::FreezeGuard;
pub use runlog::{Event, RunLog};
pub use stages::{
    retrain_unified, run_methods, run_stream, run_stream_with, run_task, sweep, RunOptions,
    SweepPoint,
};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dcn::DriftCompensator;
use crate::error::{contract, Error, Result};
use crate::metrics::{AccuracyMatrix, MetricSummary};
use crate::model::{FrozenModel, ModelConfig, ModelState};
use crate::prototypes::PrototypeStore;
use crate::tensor::{SgdConfig, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Full,
    Finetune,
    Base,
    BaseUct,
    Sdc,
    DcnS1Only,
    DcnS2Only,
    DcnS1lossS2,
    DefaultNoUpdate,
}

/// How stored prototypes follow the model between tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrototypeUpdate {
    Keep,
    Dcn,
    Sdc,
}

/// Where the second-stage compensator fit starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage2Start {
    Inherit,
    Identity,
}

/// Which pieces of the procedure a method runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MethodPlan {
    pub distill: bool,
    pub dc_in_stage1: bool,
    pub stage2: Option<Stage2Start>,
    pub update: PrototypeUpdate,
    pub unified_retrain: bool,
    /// Local softmax over the current head with earlier heads frozen; when
    /// false every head trains on a global softmax.
    pub local_heads: bool,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Full,
        Method::Finetune,
        Method::Base,
        Method::BaseUct,
        Method::Sdc,
        Method::DcnS1Only,
        Method::DcnS2Only,
        Method::DcnS1lossS2,
        Method::DefaultNoUpdate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "FULL",
            Method::Finetune => "FINETUNE",
            Method::Base => "BASE",
            Method::BaseUct => "BASE_UCT",
            Method::Sdc => "SDC",
            Method::DcnS1Only => "DCN_S1_ONLY",
            Method::DcnS2Only => "DCN_S2_ONLY",
            Method::DcnS1lossS2 => "DCN_S1LOSS_S2",
            Method::DefaultNoUpdate => "DEFAULT_NO_UPDATE",
        }
    }

    pub fn plan(self) -> MethodPlan {
        use PrototypeUpdate::*;
        let base = MethodPlan {
            distill: true,
            dc_in_stage1: false,
            stage2: None,
            update: Keep,
            unified_retrain: true,
            local_heads: true,
        };
        match self {
            Method::Full => MethodPlan {
                dc_in_stage1: true,
                stage2: Some(Stage2Start::Inherit),
                update: Dcn,
                ..base
            },
            Method::Finetune => MethodPlan {
                distill: false,
                unified_retrain: false,
                local_heads: false,
                ..base
            },
            Method::Base => MethodPlan {
                unified_retrain: false,
                ..base
            },
            Method::BaseUct => base,
            Method::Sdc => MethodPlan { update: Sdc, ..base },
            Method::DcnS1Only => MethodPlan {
                dc_in_stage1: true,
                update: Dcn,
                ..base
            },
            Method::DcnS2Only => MethodPlan {
                stage2: Some(Stage2Start::Identity),
                update: Dcn,
                ..base
            },
            Method::DcnS1lossS2 => MethodPlan {
                dc_in_stage1: true,
                stage2: Some(Stage2Start::Identity),
                update: Dcn,
                ..base
            },
            Method::DefaultNoUpdate => MethodPlan {
                dc_in_stage1: true,
                ..base
            },
        }
    }

    /// Methods whose compensator is trained on every task after the first.
    pub fn trains_dcn(self) -> bool {
        let p = self.plan();
        p.dc_in_stage1 || p.stage2.is_some()
    }

    pub fn valid_names() -> String {
        Method::ALL.map(Method::name).join(", ")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown method {s:?}; valid methods: {}",
                    Method::valid_names()
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_lr: f32,
    pub batch: usize,
    pub epochs_s1: usize,
    pub epochs_s2: usize,
    pub epochs_s3: usize,
    /// Distillation weight.
    pub alpha: f32,
    /// Drift-compensation weight in the first stage.
    pub beta: f32,
    /// Samples drawn per class for classifier retraining.
    #[serde(rename = "S_n")]
    pub s_n: usize,
    pub momentum: f32,
    /// Redraw every head before classifier retraining instead of refining.
    #[serde(default)]
    pub reinit_heads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 0.005,
            batch: 16,
            epochs_s1: 30,
            epochs_s2: 20,
            epochs_s3: 20,
            alpha: 0.1,
            beta: 1.0,
            s_n: 256,
            momentum: 0.9,
            reinit_heads: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return contract("alpha and beta must be non-negative");
        }
        self.sgd(self.epochs_s1).validate()
    }

    pub fn sgd(&self, epochs: usize) -> SgdConfig {
        SgdConfig {
            max_lr: self.max_lr,
            batch_size: self.batch,
            epochs_per_stage: epochs,
            momentum: self.momentum,
        }
    }
}

/// A fixed linear transform composed onto the feature extractor at the start
/// of every task after the first, so that old-class features move in a
/// controlled way on top of whatever drift training itself causes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InducedDrift {
    #[default]
    None,
    /// `f ← factor · f`.
    Scaling { factor: f32 },
    /// `f ← (I + strength · G / √D) f` with a fresh Gaussian `G` per task.
    Linear { strength: f32 },
}

impl InducedDrift {
    /// The map for task `task`, or `None` when nothing is induced.
    pub fn map(&self, dim: usize, seed: u64, task: usize) -> Option<Tensor> {
        match *self {
            InducedDrift::None => None,
            InducedDrift::Scaling { factor } => Some(Tensor::from_fn(&[dim, dim], |i| {
                if i / dim == i % dim {
                    factor
                } else {
                    0.0
                }
            })),
            InducedDrift::Linear { strength } => {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, SeedTag::Drift, task));
                let scale = strength / (dim as f32).sqrt();
                Some(Tensor::from_fn(&[dim, dim], |i| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    let eye = if i / dim == i % dim { 1.0 } else { 0.0 };
                    eye + scale * z
                }))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub method: Method,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub induced_drift: InducedDrift,
}

impl StrategyConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            induced_drift: InducedDrift::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Everything carried from one task to the next.
#[derive(Clone, Debug)]
pub struct RunState {
    pub model: ModelState,
    /// F^{t-1}; present exactly when at least one task has been trained.
    pub old_model: Option<FrozenModel>,
    pub store: PrototypeStore,
    pub dcn: DriftCompensator,
    pub accuracy: AccuracyMatrix,
    pub seed: u64,
    /// `(task, D^t)` for every task after the first.
    pub drift: Vec<(usize, f64)>,
    pub dcn_trainings: usize,
    pub freeze_checks: usize,
    pub tasks_done: usize,
}

impl RunState {
    pub fn new(cfg: &StrategyConfig, channels: usize, length: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let model = ModelState::new(&cfg.model, channels, length, sub_seed(seed, SeedTag::Backbone, 0))?;
        let dim = model.embed_dim();
        Ok(Self {
            model,
            old_model: None,
            store: PrototypeStore::new(),
            dcn: DriftCompensator::new(dim),
            accuracy: AccuracyMatrix::new(),
            seed,
            drift: Vec::new(),
            dcn_trainings: 0,
            freeze_checks: 0,
            tasks_done: 0,
        })
    }
}

/// Seconds spent in each stage of one task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub task: usize,
    pub stage1: f64,
    pub stage2: f64,
    pub stage3: f64,
    pub evaluation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config: StrategyConfig,
    pub seed: u64,
    pub accuracy: AccuracyMatrix,
    pub summary: MetricSummary,
    pub drift: Vec<(usize, f64)>,
    pub dcn_trainings: usize,
    pub freeze_checks: usize,
    pub timings: Vec<StageTiming>,
    pub log: RunLog,
}

impl RunReport {
    pub fn wall_clock_seconds(&self) -> f64 {
        self.timings
            .iter()
            .map(|t| t.stage1 + t.stage2 + t.stage3 + t.evaluation)
            .sum()
    }

    pub fn final_drift(&self) -> Option<f64> {
        self.drift.last().map(|&(_, d)| d)
    }

    pub fn mean_drift(&self) -> Option<f64> {
        if self.drift.is_empty() {
            return None;
        }
        Some(self.drift.iter().map(|&(_, d)| d).sum::<f64>() / self.drift.len() as f64)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum SeedTag {
    Backbone = 1,
    Head = 2,
    Stage1 = 3,
    Stage2 = 4,
    Sampling = 5,
    Stage3 = 6,
    Drift = 7,
    Reinit = 8,
}

/// Independent stream of randomness per (run seed, purpose, index).
pub(crate) fn sub_seed(seed: u64, tag: SeedTag, index: usize) -> u64 {
    let mut z = seed
        ^ (tag as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        let err = "NOPE".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("DCN_S1LOSS_S2"), "{err}");
    }

    #[test]
    fn lattice() {
        assert!(Method::Full.trains_dcn());
        assert!(!Method::BaseUct.trains_dcn());
        assert!(!Method::Base.plan().unified_retrain);
        assert!(!Method::Finetune.plan().distill);
        assert_eq!(Method::DcnS1lossS2.plan().stage2, Some(Stage2Start::Identity));
        assert_eq!(Method::DefaultNoUpdate.plan().update, PrototypeUpdate::Keep);
        assert!(Method::DefaultNoUpdate.plan().dc_in_stage1);
    }

    #[test]
    fn sub_seeds_differ() {
        let a = sub_seed(1, SeedTag::Head, 1);
        assert_ne!(a, sub_seed(1, SeedTag::Head, 2));
        assert_ne!(a, sub_seed(2, SeedTag::Head, 1));
        assert_ne!(a, sub_seed(1, SeedTag::Stage1, 1));
        assert_eq!(a, sub_seed(1, SeedTag::Head, 1));
    }

    #[test]
    fn train_config_json_keys() {
        let v = serde_json::to_value(TrainConfig::default()).unwrap();
        assert_eq!(v["S_n"], 256);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr":1}"#).is_err());
        let partial: TrainConfig = serde_json::from_str(r#"{"alpha":0.5}"#).unwrap();
        assert_eq!(partial.beta, 1.0);
    }

    #[test]
    fn scaling_map_is_diagonal() {
        let m = InducedDrift::Scaling { factor: 2.0 }.map(3, 0, 2).unwrap();
        assert!(m.bit_eq(&Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 2.0 } else { 0.0 })));
        assert!(InducedDrift::None.map(3, 0, 2).is_none());
    }
}
