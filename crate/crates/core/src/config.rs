//! Experiment configuration file and construction of the task stream it
//! describes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, make_synthetic, split_tasks, SyntheticConfig, TaskStream};
use crate::error::{io_err, Error, Result};
use crate::model::ModelConfig;
use crate::protocol::{InducedDrift, Method, StrategyConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Number of classes; read from the dataset's meta file for directories.
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_per_class: Option<usize>,
    /// Keep `⌈ratio · C⌉` principal channel components per task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca_ratio: Option<f64>,
    /// Synthetic only: i.i.d. noise added to every time step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f32>,
    #[serde(default)]
    pub induced_drift: InducedDrift,
}

/// One method or every method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodSelection {
    One(Method),
    All,
}

impl MethodSelection {
    pub fn methods(self) -> Vec<Method> {
        match self {
            MethodSelection::One(m) => vec![m],
            MethodSelection::All => Method::ALL.to_vec(),
        }
    }

    /// The method whose results fill the top-level report fields.
    pub fn primary(self) -> Method {
        match self {
            MethodSelection::One(m) => m,
            MethodSelection::All => Method::Full,
        }
    }
}

impl FromStr for MethodSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("ALL") {
            return Ok(MethodSelection::All);
        }
        s.parse::<Method>().map(MethodSelection::One).map_err(|_| {
            Error::Usage(format!(
                "unknown method {s:?}; valid values: {}, ALL",
                Method::valid_names()
            ))
        })
    }
}

impl fmt::Display for MethodSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodSelection::One(m) => m.fmt(f),
            MethodSelection::All => f.write_str("ALL"),
        }
    }
}

impl Serialize for MethodSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MethodSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub method: MethodSelection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    /// Parses a config; malformed or unknown keys become usage errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy(self.method.primary()).validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Usage("config needs at least one seed".into()));
        }
        let d = &self.dataset;
        if let Some(r) = d.pca_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Usage(format!("pca_ratio must lie in (0, 1], got {r}")));
            }
        }
        match d.kind {
            DatasetKind::Synthetic => {
                for (name, v) in [
                    ("K", d.classes),
                    ("C", d.channels),
                    ("L", d.length),
                    ("n_per_class", d.n_per_class),
                ] {
                    if v.is_none() {
                        return Err(Error::Usage(format!("synthetic dataset needs {name}")));
                    }
                }
            }
            DatasetKind::Directory => {
                if d.path.is_none() {
                    return Err(Error::Usage("directory dataset needs path".into()));
                }
            }
        }
        Ok(())
    }

    pub fn strategy(&self, method: Method) -> StrategyConfig {
        StrategyConfig {
            method,
            model: self.model.clone(),
            train: self.train.clone(),
            induced_drift: self.dataset.induced_drift,
        }
    }

    /// Builds the task stream for `seed`: generate or load, split into
    /// two-class tasks, then reduce channels per task when configured.
    /// Relative dataset paths resolve against `base_dir`.
    pub fn build_stream(&self, seed: u64, base_dir: &Path) -> Result<TaskStream> {
        let d = &self.dataset;
        let (samples, classes) = match d.kind {
            DatasetKind::Synthetic => {
                let mut sc = SyntheticConfig::new(
                    d.classes.unwrap_or(0),
                    d.channels.unwrap_or(0),
                    d.length.unwrap_or(0),
                    d.n_per_class.unwrap_or(0),
                );
                if let Some(noise) = d.noise_std {
                    sc.noise_std = noise;
                }
                (make_synthetic(&sc, seed)?, sc.classes)
            }
            DatasetKind::Directory => {
                let path = d.path.as_ref().expect("validated");
                let path = if path.is_relative() {
                    base_dir.join(path)
                } else {
                    path.clone()
                };
                let (samples, meta) = load_dataset(&path)?;
                for (name, declared, actual) in [
                    ("K", d.classes, meta.classes),
                    ("C", d.channels, meta.channels),
                    ("L", d.length, meta.length),
                ] {
                    if declared.is_some_and(|v| v != actual) {
                        return Err(Error::Validation(format!(
                            "config {name}={} disagrees with dataset meta {actual}",
                            declared.unwrap_or(0)
                        )));
                    }
                }
                (samples, meta.classes)
            }
        };
        let mut stream = split_tasks(&samples, classes, seed)?;
        if let Some(ratio) = d.pca_ratio {
            for task in &mut stream.tasks {
                task.pca_reduce(ratio)?;
            }
        }
        Ok(stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": {"kind": "synthetic", "K": 4, "C": 2, "L": 16, "n_per_class": 10},
        "method": "FULL",
        "seeds": [3]
    }"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.method, MethodSelection::One(Method::Full));
        let back: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let text = MINIMAL.replace("\"seeds\"", "\"sedes\"");
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "{err}");
        assert!(err.to_string().contains("seeds"), "{err}");
    }

    #[test]
    fn unknown_method_lists_valid_values() {
        let text = MINIMAL.replace("FULL", "FANCY");
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("BASE_UCT") && err.contains("ALL"), "{err}");
    }

    #[test]
    fn synthetic_needs_extents() {
        let text = MINIMAL.replace("\"n_per_class\": 10", "\"pca_ratio\": 0.5");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn stream_with_pca() {
        let mut cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        cfg.dataset.pca_ratio = Some(0.5);
        let stream = cfg.build_stream(1, Path::new(".")).unwrap();
        assert_eq!(stream.tasks.len(), 2);
        assert!(stream.tasks.iter().all(|t| t.train[0].channels() == 1));
    }
}
