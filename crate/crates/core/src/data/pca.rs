use nalgebra::{DMatrix, SymmetricEigen};

use super::TimeSeriesSample;
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Channel projection fit on one task's training data.
///
/// Channels are the features; every (sample, time step) pair is one
/// observation. Output channel `i` is `components[i] · (x − mean)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// `k × C`, rows ordered by decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl PcaProjection {
    pub fn fit(samples: &[TimeSeriesSample], ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return contract(format!("pca ratio must lie in (0, 1], got {ratio}"));
        }
        let Some(first) = samples.first() else {
            return contract("pca fit requires at least one sample");
        };
        let c = first.channels();
        if samples.iter().any(|s| s.channels() != c) {
            return contract("pca fit samples disagree on channel count");
        }
        let k = ((ratio * c as f64) - 1e-9).ceil().max(1.0) as usize;

        let mut mean = vec![0.0f64; c];
        let mut count = 0usize;
        for s in samples {
            let l = s.length();
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += s.values.row(ch).iter().map(|&v| v as f64).sum::<f64>();
            }
            count += l;
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);

        let mut cov = DMatrix::<f64>::zeros(c, c);
        let mut centered = vec![0.0f64; c];
        for s in samples {
            for t in 0..s.length() {
                for ch in 0..c {
                    centered[ch] = s.values.row(ch)[t] as f64 - mean[ch];
                }
                for i in 0..c {
                    for j in i..c {
                        cov[(i, j)] += centered[i] * centered[j];
                    }
                }
            }
        }
        let denom = (count.max(2) - 1) as f64;
        for i in 0..c {
            for j in i..c {
                cov[(i, j)] /= denom;
                cov[(j, i)] = cov[(i, j)];
            }
        }

        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = Vec::with_capacity(k);
        let mut explained_variance = Vec::with_capacity(k);
        for &idx in order.iter().take(k) {
            let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            let pivot = v
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(1.0);
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            explained_variance.push(eig.eigenvalues[idx].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            explained_variance,
        })
    }

    pub fn output_channels(&self) -> usize {
        self.components.len()
    }

    pub fn apply(&self, s: &TimeSeriesSample) -> Result<TimeSeriesSample> {
        if s.channels() != self.mean.len() {
            return contract(format!(
                "projection expects {} channels, sample has {}",
                self.mean.len(),
                s.channels()
            ));
        }
        let l = s.length();
        let mut out = Vec::with_capacity(self.components.len() * l);
        for comp in &self.components {
            for t in 0..l {
                let v: f64 = comp
                    .iter()
                    .enumerate()
                    .map(|(ch, w)| w * (s.values.row(ch)[t] as f64 - self.mean[ch]))
                    .sum();
                out.push(v as f32);
            }
        }
        TimeSeriesSample::new(Tensor::new(vec![self.components.len(), l], out)?, s.label)
    }

    pub fn apply_all(&self, samples: &[TimeSeriesSample]) -> Result<Vec<TimeSeriesSample>> {
        samples.iter().map(|s| self.apply(s)).collect()
    }
}

/// Fits a projection on `train` only and applies it to both `train` and `eval`.
pub fn pca_reduce(
    train: &[TimeSeriesSample],
    eval: &[TimeSeriesSample],
    ratio: f64,
) -> Result<(Vec<TimeSeriesSample>, Vec<TimeSeriesSample>, PcaProjection)> {
    let projection = PcaProjection::fit(train, ratio)?;
    Ok((
        projection.apply_all(train)?,
        projection.apply_all(eval)?,
        projection,
    ))
}
