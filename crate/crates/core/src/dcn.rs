//! Drift compensator: a bias-free `D×D` linear map from the previous model's
//! feature space into the current one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TimeSeriesSample;
use crate::error::{contract, Error, Result};
use crate::model::{loss_dc, FrozenModel};
use crate::tensor::{onecycle_lr, Graph, Sgd, SgdConfig, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DriftCompensator {
    pub weight: Tensor,
}

/// Loss trace of one compensator fit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub loss_before: f32,
    pub loss_after: f32,
    pub epoch_losses: Vec<f32>,
}

impl DriftCompensator {
    /// Identity map, trainable.
    pub fn new(dim: usize) -> Self {
        Self {
            weight: Tensor::identity(dim).with_grad(true),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `W · v`.
    pub fn apply(&self, v: &[f32]) -> Result<Vec<f32>> {
        let d = self.dim();
        if v.len() != d {
            return Err(Error::Dimension {
                op: "dcn_apply",
                lhs: self.weight.shape().to_vec(),
                rhs: vec![v.len()],
            });
        }
        Ok((0..d)
            .map(|i| self.weight.row(i).iter().zip(v).map(|(w, x)| w * x).sum())
            .collect())
    }

    /// Applies the map to every row of `features[N×D]`.
    pub fn apply_rows(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.dim() {
            return Err(Error::Dimension {
                op: "dcn_apply",
                lhs: self.weight.shape().to_vec(),
                rhs: features.shape().to_vec(),
            });
        }
        features.matmul(&self.weight.transpose()?)
    }

    /// `mean_i ‖W old_i − new_i‖²` over paired feature rows.
    pub fn loss(&self, old: &Tensor, new: &Tensor) -> Result<f32> {
        let mut g = Graph::new();
        let w = g.constant(&self.weight);
        let o = g.constant(old);
        let n = g.constant(new);
        let l = loss_dc(&mut g, w, o, n)?;
        Ok(g.data(l)[0])
    }

    /// Refines the current weights on precomputed feature pairs with SGD and
    /// a one-cycle schedule. Both feature sets stay untouched.
    pub fn fit_features(
        &mut self,
        old: &Tensor,
        new: &Tensor,
        cfg: &SgdConfig,
        seed: u64,
    ) -> Result<FitReport> {
        cfg.validate()?;
        if old.shape() != new.shape() {
            return Err(Error::Dimension {
                op: "dcn_fit",
                lhs: old.shape().to_vec(),
                rhs: new.shape().to_vec(),
            });
        }
        let n = old.rows();
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        let total = steps_per_epoch * cfg.epochs_per_stage;
        let mut report = FitReport {
            loss_before: self.loss(old, new)?,
            ..FitReport::default()
        };
        self.weight.set_requires_grad(true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = Sgd::new(cfg.momentum);
        let mut order: Vec<usize> = (0..n).collect();
        let mut step = 0;
        for _ in 0..cfg.epochs_per_stage {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let o = gather_rows(old, batch)?;
                let t = gather_rows(new, batch)?;
                let mut g = Graph::new();
                let w = g.leaf(&self.weight);
                let o = g.constant(&o);
                let t = g.constant(&t);
                let l = loss_dc(&mut g, w, o, t)?;
                epoch_loss += g.data(l)[0] * batch.len() as f32;
                let grads = g.grad(l, &[w])?;
                let lr = onecycle_lr(step, total, cfg.max_lr)?;
                opt.step(&mut [&mut self.weight], &grads, lr)?;
                step += 1;
            }
            report.epoch_losses.push(epoch_loss / n as f32);
        }
        report.loss_after = self.loss(old, new)?;
        Ok(report)
    }

    /// Second-stage refinement: both models frozen, only the map learns.
    pub fn train_stage2(
        &mut self,
        old: &FrozenModel,
        new: &FrozenModel,
        data: &[TimeSeriesSample],
        cfg: &SgdConfig,
        seed: u64,
    ) -> Result<FitReport> {
        if data.is_empty() {
            return contract("drift compensator training needs data");
        }
        if old.embed_dim() != self.dim() || new.embed_dim() != self.dim() {
            return Err(Error::Dimension {
                op: "dcn_train",
                lhs: vec![old.embed_dim(), new.embed_dim()],
                rhs: vec![self.dim()],
            });
        }
        let f_old = old.features(data)?;
        let f_new = new.features(data)?;
        self.fit_features(&f_old, &f_new, cfg, seed)
    }
}

pub(crate) fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * t.cols());
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), t.cols()], data)
}
