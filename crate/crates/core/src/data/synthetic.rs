use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TimeSeriesSample;
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Sinusoids summed per channel in a class template.
const HARMONICS: usize = 3;

/// How the class templates relate to one another.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DriftProfile {
    /// Independent templates per class.
    #[default]
    Stationary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub channels: usize,
    pub length: usize,
    pub n_per_class: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f32,
    #[serde(default)]
    pub drift_profile: DriftProfile,
}

fn default_noise() -> f32 {
    0.1
}

impl SyntheticConfig {
    pub fn new(classes: usize, channels: usize, length: usize, n_per_class: usize) -> Self {
        Self {
            classes,
            channels,
            length,
            n_per_class,
            noise_std: default_noise(),
            drift_profile: DriftProfile::Stationary,
        }
    }
}

struct Harmonic {
    freq: f32,
    phase: f32,
    amp: f32,
}

/// Generates `n_per_class` noisy copies of a smooth per-class template for
/// each of `classes` classes. Output is grouped by class, in class order.
pub fn make_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<TimeSeriesSample>> {
    if cfg.classes == 0 || !cfg.classes.is_multiple_of(2) {
        return contract(format!(
            "synthetic class count must be even (two classes per task), got {}",
            cfg.classes
        ));
    }
    if cfg.n_per_class < 8 {
        return contract(format!(
            "n_per_class must be at least 8, got {}",
            cfg.n_per_class
        ));
    }
    if cfg.channels == 0 || cfg.length == 0 {
        return contract("channels and length must be positive");
    }
    if !(cfg.noise_std >= 0.0) {
        return contract("noise_std must be non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f32>> = (0..cfg.classes)
        .map(|_| template(cfg, &mut rng))
        .collect();

    let noise = Normal::new(0.0f32, cfg.noise_std.max(f32::MIN_POSITIVE))
        .expect("finite std");
    let mut out = Vec::with_capacity(cfg.classes * cfg.n_per_class);
    for (label, tpl) in templates.iter().enumerate() {
        for _ in 0..cfg.n_per_class {
            let values: Vec<f32> = if cfg.noise_std == 0.0 {
                tpl.clone()
            } else {
                tpl.iter().map(|&v| v + noise.sample(&mut rng)).collect()
            };
            let values = Tensor::new(vec![cfg.channels, cfg.length], values)?;
            out.push(TimeSeriesSample::new(values, label)?);
        }
    }
    Ok(out)
}

fn template(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut values = Vec::with_capacity(cfg.channels * cfg.length);
    for _ in 0..cfg.channels {
        let harmonics: Vec<Harmonic> = (0..HARMONICS)
            .map(|_| Harmonic {
                freq: rng.random_range(0.5..6.0),
                phase: rng.random_range(0.0..std::f32::consts::TAU),
                amp: rng.random_range(0.3..1.0),
            })
            .collect();
        for step in 0..cfg.length {
            let t = step as f32 / cfg.length as f32;
            let v: f32 = harmonics
                .iter()
                .map(|h| h.amp * (std::f32::consts::TAU * h.freq * t + h.phase).sin())
                .sum();
            values.push(v);
        }
    }
    values
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let cfg = SyntheticConfig::new(4, 2, 32, 10);
        assert_eq!(make_synthetic(&cfg, 3).unwrap(), make_synthetic(&cfg, 3).unwrap());
        assert_ne!(make_synthetic(&cfg, 3).unwrap(), make_synthetic(&cfg, 4).unwrap());
    }

    #[test]
    fn zero_noise_collapses_class() {
        let mut cfg = SyntheticConfig::new(2, 3, 16, 8);
        cfg.noise_std = 0.0;
        let s = make_synthetic(&cfg, 1).unwrap();
        for class in s.chunks(8) {
            assert!(class.iter().all(|x| x.values.bit_eq(&class[0].values)));
        }
    }

    #[test]
    fn odd_class_count_rejected() {
        let err = make_synthetic(&SyntheticConfig::new(3, 1, 8, 8), 0).unwrap_err();
        assert!(err.to_string().contains("two classes per task"));
    }

    #[test]
    fn too_few_per_class_rejected() {
        assert!(make_synthetic(&SyntheticConfig::new(2, 1, 8, 7), 0).is_err());
    }
}
