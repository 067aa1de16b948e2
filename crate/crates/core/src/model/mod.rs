//! Frozen patch-MLP backbone with serial residual adapters, the bank of
//! per-task cosine heads, and the losses trained on top of them.

mod backbone;
mod checkpoint;
mod heads;
mod losses;

pub use backbone::{Block, FrozenBackbone};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
};
pub use heads::{CosineHead, HeadBank};
pub use losses::{
    feature_distance, loss_ce_unified, loss_cos, loss_cos_global, loss_dc, loss_kd,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesSample;
use crate::error::{contract, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Features are extracted in chunks of this many samples when no gradient
/// is needed.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature dimension D.
    #[serde(rename = "D")]
    pub embed_dim: usize,
    pub n_blocks: usize,
    /// Adapter bottleneck width.
    pub r: usize,
    /// Patch length in time steps; `None` picks `round(L / 8)`.
    #[serde(default)]
    pub patch_len: Option<usize>,
    /// Adapter scale factor.
    pub s: f32,
    /// Cosine logit scale.
    pub s_c: f32,
    /// Cosine margin.
    pub m: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            n_blocks: 2,
            r: 8,
            patch_len: None,
            s: 1.0,
            s_c: 10.0,
            m: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_blocks == 0 {
            return contract("D and n_blocks must be positive");
        }
        if self.r == 0 || self.r >= self.embed_dim {
            return contract(format!(
                "adapter bottleneck r={} must satisfy 0 < r < D={}",
                self.r, self.embed_dim
            ));
        }
        if self.patch_len == Some(0) {
            return contract("patch_len must be positive");
        }
        Ok(())
    }

    pub fn resolved_patch_len(&self, length: usize) -> usize {
        self.patch_len
            .unwrap_or_else(|| ((length as f64 / 8.0).round() as usize).max(1))
    }
}

/// Residual bottleneck: `out = x + relu(s · (x W_down)) W_up`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub down: Tensor,
    pub up: Tensor,
    pub scale: f32,
}

impl Adapter {
    /// `W_down ~ N(0, 0.02²)`, `W_up = 0`, so a fresh adapter is the identity.
    pub fn new(dim: usize, bottleneck: usize, scale: f32, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        Self {
            down: Tensor::from_fn(&[dim, bottleneck], |_| normal.sample(rng)).with_grad(true),
            up: Tensor::zeros(&[bottleneck, dim]).with_grad(true),
            scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.down.shape()[0]
    }
}

/// Applies an adapter to `x[·×D]` inside a graph.
pub fn adapter_forward(g: &mut Graph, x: Var, down: Var, up: Var, scale: f32) -> Result<Var> {
    let d = g.shape(down)[0];
    if g.shape(x).last() != Some(&d) {
        return Err(Error::Dimension {
            op: "adapter",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(down).to_vec(),
        });
    }
    let h = g.matmul(x, down)?;
    let h = g.scale(h, scale);
    let h = g.relu(h);
    let h = g.matmul(h, up)?;
    g.add(x, h)
}

/// Graph handles for one registration of a model's parameters.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub adapters: Vec<(Var, Var)>,
    pub heads: Vec<Var>,
    backbone: backbone::BackboneVars,
    feature_map: Option<Var>,
}

impl ModelVars {
    /// Adapter handles flattened as `[down_0, up_0, down_1, ...]`.
    pub fn adapter_params(&self) -> Vec<Var> {
        self.adapters.iter().flat_map(|&(d, u)| [d, u]).collect()
    }
}

/// Backbone, shared adapters and head bank: the tunable model F^t plus classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub backbone: FrozenBackbone,
    pub adapters: Vec<Adapter>,
    pub heads: HeadBank,
    /// Fixed `D×D` map applied to pooled features (`f ← M f`); never trained.
    pub feature_map: Option<Tensor>,
}

impl ModelState {
    pub fn new(cfg: &ModelConfig, channels: usize, length: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let patch_len = cfg.resolved_patch_len(length);
        if length < patch_len {
            return contract(format!("series length {length} shorter than patch_len {patch_len}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = FrozenBackbone::generate(channels, patch_len, cfg.embed_dim, cfg.n_blocks, &mut rng);
        let adapters = (0..cfg.n_blocks)
            .map(|_| Adapter::new(cfg.embed_dim, cfg.r, cfg.s, &mut rng))
            .collect();
        Ok(Self {
            backbone,
            adapters,
            heads: HeadBank::new(cfg.s_c, cfg.m),
            feature_map: None,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.backbone.embed_dim
    }

    /// Registers backbone weights as constants and adapters/heads as leaves
    /// (tracked according to each tensor's `requires_grad`).
    pub fn register(&self, g: &mut Graph) -> ModelVars {
        ModelVars {
            backbone: self.backbone.register(g),
            adapters: self
                .adapters
                .iter()
                .map(|a| (g.leaf(&a.down), g.leaf(&a.up)))
                .collect(),
            heads: self.heads.heads.iter().map(|h| g.leaf(&h.weights)).collect(),
            // stored transposed so the forward pass is a plain `F · Mᵀ`
            feature_map: self
                .feature_map
                .as_ref()
                .map(|m| g.constant(&m.transpose().expect("2-D map"))),
        }
    }

    /// Batched feature extraction `[B×D]`: patchify, embed, then each frozen
    /// block followed by its adapter, then mean-pool over patches.
    pub fn forward(&self, g: &mut Graph, vars: &ModelVars, batch: &[&TimeSeriesSample]) -> Result<Var> {
        let adapters: Vec<(Var, Var, f32)> = vars
            .adapters
            .iter()
            .zip(&self.adapters)
            .map(|(&(d, u), a)| (d, u, a.scale))
            .collect();
        let f = self.backbone.forward(g, &vars.backbone, &adapters, batch)?;
        match vars.feature_map {
            Some(m) => g.matmul(f, m),
            None => Ok(f),
        }
    }

    /// Composes `map` onto the fixed feature map: `M ← map · M`.
    pub fn compose_feature_map(&mut self, map: &Tensor) -> Result<()> {
        let d = self.embed_dim();
        if map.shape() != [d, d] {
            return Err(Error::Dimension {
                op: "feature_map",
                lhs: map.shape().to_vec(),
                rhs: vec![d, d],
            });
        }
        let next = match &self.feature_map {
            Some(m) => map.matmul(m)?,
            None => map.clone(),
        };
        self.feature_map = Some(next.with_grad(false));
        Ok(())
    }

    /// Features of a single sample.
    pub fn extract_features(&self, x: &TimeSeriesSample) -> Result<Vec<f32>> {
        Ok(self.features(std::slice::from_ref(x))?.into_data())
    }

    /// Features of many samples as a `[N×D]` tensor, without gradient tracking.
    pub fn features(&self, samples: &[TimeSeriesSample]) -> Result<Tensor> {
        let refs: Vec<&TimeSeriesSample> = samples.iter().collect();
        self.features_of(&refs)
    }

    pub fn features_of(&self, samples: &[&TimeSeriesSample]) -> Result<Tensor> {
        if samples.is_empty() {
            return contract("feature extraction needs at least one sample");
        }
        let frozen = self.frozen_view();
        let mut out = Vec::with_capacity(samples.len() * self.embed_dim());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let vars = frozen.register(&mut g);
            let f = frozen.forward(&mut g, &vars, chunk)?;
            out.extend_from_slice(g.data(f));
        }
        Tensor::new(vec![samples.len(), self.embed_dim()], out)
    }

    fn frozen_view(&self) -> ModelState {
        let mut m = self.clone();
        m.set_trainable(false);
        m
    }

    /// Sets `requires_grad` on every adapter and head tensor.
    pub fn set_trainable(&mut self, trainable: bool) {
        for a in &mut self.adapters {
            a.down.set_requires_grad(trainable);
            a.up.set_requires_grad(trainable);
        }
        for h in &mut self.heads.heads {
            h.weights.set_requires_grad(trainable);
        }
    }

    /// Deep, fully frozen copy (F^{t-1} for the next task).
    pub fn snapshot(&self) -> FrozenModel {
        FrozenModel(self.frozen_view())
    }

    /// Cosine logits over every seen class, ascending class id.
    pub fn cosine_logits(&self, feature: &[f32]) -> Result<Vec<(usize, f32)>> {
        self.heads.cosine_logits(feature)
    }

    /// Class with the highest cosine logit; ties go to the lowest class id.
    pub fn predict(&self, x: &TimeSeriesSample) -> Result<usize> {
        let f = self.extract_features(x)?;
        self.heads.predict_feature(&f)
    }

    /// Predictions for many samples.
    pub fn predict_all(&self, samples: &[TimeSeriesSample]) -> Result<Vec<usize>> {
        let feats = self.features(samples)?;
        (0..samples.len())
            .map(|i| self.heads.predict_feature(feats.row(i)))
            .collect()
    }

    /// Fraction of `samples` predicted correctly.
    pub fn accuracy(&self, samples: &[TimeSeriesSample]) -> Result<f64> {
        let preds = self.predict_all(samples)?;
        let correct = preds
            .iter()
            .zip(samples)
            .filter(|(p, s)| **p == s.label)
            .count();
        Ok(correct as f64 / samples.len() as f64)
    }
}

/// A model snapshot whose parameters can no longer be trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenModel(ModelState);

impl FrozenModel {
    pub fn model(&self) -> &ModelState {
        &self.0
    }

    pub fn features(&self, samples: &[TimeSeriesSample]) -> Result<Tensor> {
        self.0.features(samples)
    }

    pub fn features_of(&self, samples: &[&TimeSeriesSample]) -> Result<Tensor> {
        self.0.features_of(samples)
    }

    pub fn extract_features(&self, x: &TimeSeriesSample) -> Result<Vec<f32>> {
        self.0.extract_features(x)
    }

    pub fn embed_dim(&self) -> usize {
        self.0.embed_dim()
    }
}

pub(crate) fn checkpoint_writer() -> checkpoint::Writer {
    checkpoint::Writer::default()
}

pub(crate) fn checkpoint_reader(bytes: &[u8]) -> checkpoint::Reader<'_> {
    checkpoint::Reader::new(bytes)
}
