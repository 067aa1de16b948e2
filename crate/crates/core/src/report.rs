//! Multi-seed, multi-method experiment driver and the files it writes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::thread;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, MethodSelection};
use crate::error::{contract, io_err, Result};
use crate::metrics::{AccuracyMatrix, MetricSummary};
use crate::protocol::{run_stream_with, Method, RunLog, RunOptions, RunReport};

/// Mean, minimum and maximum of a statistic across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedStats {
    #[serde(rename = "A_T")]
    pub a_t: Spread,
    #[serde(rename = "F_T", skip_serializing_if = "Option::is_none")]
    pub f_t: Option<Spread>,
    #[serde(rename = "A_cur")]
    pub a_cur: Spread,
}

/// All seeds of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub runs: Vec<RunReport>,
    /// Element-wise mean of the per-seed matrices.
    pub matrix: AccuracyMatrix,
    /// Metrics evaluated on `matrix`.
    pub summary: MetricSummary,
    pub seed_stats: SeedStats,
    /// `(task, mean D^t)` over seeds.
    pub drift: Vec<(usize, f64)>,
}

impl MethodResult {
    fn from_runs(method: Method, runs: Vec<RunReport>) -> Result<Self> {
        let Some(first) = runs.first() else {
            return contract("no runs to aggregate");
        };
        let tasks = first.accuracy.tasks();
        let n = runs.len() as f64;
        let mut matrix = AccuracyMatrix::new();
        for i in 1..=tasks {
            let row = (1..=i)
                .map(|j| runs.iter().map(|r| r.accuracy.get(i, j).unwrap_or(0.0)).sum::<f64>() / n)
                .map(|v| v.clamp(0.0, 1.0))
                .collect();
            matrix.push_row(row)?;
        }
        let summary = matrix.summary()?;
        let a_t: Vec<f64> = runs.iter().map(|r| r.summary.a_t).collect();
        let f_t: Vec<f64> = runs.iter().filter_map(|r| r.summary.f_t).collect();
        let a_cur: Vec<f64> = runs.iter().map(|r| r.summary.a_cur).collect();
        let seed_stats = SeedStats {
            a_t: Spread::of(&a_t).expect("non-empty"),
            f_t: Spread::of(&f_t),
            a_cur: Spread::of(&a_cur).expect("non-empty"),
        };
        let drift = first
            .drift
            .iter()
            .enumerate()
            .map(|(k, &(task, _))| {
                let mean = runs.iter().map(|r| r.drift.get(k).map_or(0.0, |d| d.1)).sum::<f64>() / n;
                (task, mean)
            })
            .collect();
        Ok(Self {
            method,
            runs,
            matrix,
            summary,
            seed_stats,
            drift,
        })
    }

    pub fn mean_drift(&self) -> Option<f64> {
        if self.drift.is_empty() {
            return None;
        }
        Some(self.drift.iter().map(|d| d.1).sum::<f64>() / self.drift.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub primary: Method,
    pub methods: Vec<MethodResult>,
    pub wall_clock_seconds: f64,
}

impl ExperimentResult {
    pub fn method(&self, m: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|r| r.method == m)
    }

    pub fn primary_result(&self) -> &MethodResult {
        self.method(self.primary).expect("primary method was run")
    }
}

/// Runs `selection` on every seed; each seed builds its own stream.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    selection: MethodSelection,
    base_dir: &Path,
    prototype_dir: Option<&Path>,
) -> Result<ExperimentResult> {
    if seeds.is_empty() {
        return contract("no seeds to run");
    }
    let clock = Instant::now();
    let methods = selection.methods();
    let mut per_method: BTreeMap<Method, Vec<RunReport>> = BTreeMap::new();
    for &seed in seeds {
        let stream = cfg.build_stream(seed, base_dir)?;
        let results: Vec<Result<RunReport>> = thread::scope(|scope| {
            let handles: Vec<_> = methods
                .iter()
                .map(|&m| {
                    let stream = &stream;
                    scope.spawn(move || {
                        let opts = RunOptions {
                            prototype_dir: prototype_dir
                                .map(|d| d.join(m.name()).join(format!("seed{seed}"))),
                        };
                        run_stream_with(stream, &cfg.strategy(m), seed, &opts)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("run worker panicked"))
                .collect()
        });
        for (m, r) in methods.iter().zip(results) {
            per_method.entry(*m).or_default().push(r?);
        }
    }
    let results = methods
        .iter()
        .map(|m| MethodResult::from_runs(*m, per_method.remove(m).unwrap_or_default()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        config: cfg.clone(),
        seeds: seeds.to_vec(),
        primary: selection.primary(),
        methods: results,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    })
}

#[derive(Serialize)]
struct MethodEntry<'a> {
    #[serde(flatten)]
    summary: &'a MetricSummary,
    seed_stats: &'a SeedStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_drift: Option<f64>,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    method: &'a str,
    #[serde(flatten)]
    summary: &'a MetricSummary,
    seeds: &'a [u64],
    seed_stats: &'a SeedStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_drift: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    by_method: BTreeMap<&'a str, MethodEntry<'a>>,
    /// Excluded from determinism comparisons.
    wall_clock_seconds: f64,
}

/// `metrics.json` text; every field except `wall_clock_seconds` is a pure
/// function of config and seeds.
pub fn metrics_json(result: &ExperimentResult) -> Result<String> {
    let primary = result.primary_result();
    let by_method = if result.methods.len() > 1 {
        result
            .methods
            .iter()
            .map(|r| {
                (
                    r.method.name(),
                    MethodEntry {
                        summary: &r.summary,
                        seed_stats: &r.seed_stats,
                        mean_drift: r.mean_drift(),
                    },
                )
            })
            .collect()
    } else {
        BTreeMap::new()
    };
    let file = MetricsFile {
        method: primary.method.name(),
        summary: &primary.summary,
        seeds: &result.seeds,
        seed_stats: &primary.seed_stats,
        mean_drift: primary.mean_drift(),
        by_method,
        wall_clock_seconds: result.wall_clock_seconds,
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    Ok(text)
}

/// `task,<method>...` with the `A_i` curve of each method.
pub fn curves_csv(result: &ExperimentResult) -> String {
    let mut out = header(result);
    let tasks = result.primary_result().matrix.tasks();
    for i in 1..=tasks {
        out.push_str(&i.to_string());
        for r in &result.methods {
            let v = r.matrix.avg_accuracy(i).expect("row in range");
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// `task,<method>...` with mean `D^t` for every task after the first.
pub fn drift_csv(result: &ExperimentResult) -> String {
    let mut out = header(result);
    for (k, &(task, _)) in result.primary_result().drift.iter().enumerate() {
        out.push_str(&task.to_string());
        for r in &result.methods {
            out.push_str(&format!(",{}", r.drift[k].1));
        }
        out.push('\n');
    }
    out
}

fn header(result: &ExperimentResult) -> String {
    let mut out = String::from("task");
    for r in &result.methods {
        out.push(',');
        out.push_str(r.method.name());
    }
    out.push('\n');
    out
}

/// Writes every output file into `dir` (created if missing).
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io_err(&path))
    };
    write("metrics.json", metrics_json(result)?)?;
    write("accuracy_matrix.csv", result.primary_result().matrix.to_csv())?;
    if result.methods.len() > 1 {
        for r in &result.methods {
            write(&format!("accuracy_matrix_{}.csv", r.method.name()), r.matrix.to_csv())?;
        }
    }
    write("curves.csv", curves_csv(result))?;
    write("drift.csv", drift_csv(result))?;
    let mut config = serde_json::to_string_pretty(&result.config)?;
    config.push('\n');
    write("config.json", config)?;

    let mut log = RunLog::new();
    for r in &result.methods {
        for run in &r.runs {
            log.push("run", json!({"method": r.method.name(), "seed": run.seed}));
            log.extend(run.log.clone());
        }
    }
    log.write(&dir.join("run_log.jsonl"))
}

/// Metrics of a standalone matrix file.
pub fn metrics_of_csv(text: &str) -> Result<MetricSummary> {
    AccuracyMatrix::from_csv(text)?.summary()
}
