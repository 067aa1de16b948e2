use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// One task's classifier: row `i` is the weight vector of `classes[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineHead {
    pub task: usize,
    pub classes: Vec<usize>,
    pub weights: Tensor,
}

impl CosineHead {
    pub fn local_index(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadBank {
    pub heads: Vec<CosineHead>,
    pub logit_scale: f32,
    pub margin: f32,
}

impl HeadBank {
    pub fn new(logit_scale: f32, margin: f32) -> Self {
        Self {
            heads: Vec::new(),
            logit_scale,
            margin,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Appends a head for `task`, rows drawn from `N(0, 1/D)`.
    pub fn add_head(
        &mut self,
        task: usize,
        classes: &[usize],
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if classes.is_empty() {
            return contract("a head needs at least one class");
        }
        let seen: BTreeSet<usize> = self.row_classes().into_iter().collect();
        if let Some(c) = classes.iter().find(|c| seen.contains(c)) {
            return contract(format!("class {c} already has a head"));
        }
        if self.heads.iter().any(|h| h.task == task) {
            return contract(format!("task {task} already has a head"));
        }
        let normal = Normal::new(0.0f32, (1.0 / dim as f32).sqrt()).expect("valid std");
        let weights = Tensor::from_fn(&[classes.len(), dim], |_| normal.sample(rng)).with_grad(true);
        self.heads.push(CosineHead {
            task,
            classes: classes.to_vec(),
            weights,
        });
        Ok(())
    }

    pub fn head_index(&self, task: usize) -> Option<usize> {
        self.heads.iter().position(|h| h.task == task)
    }

    /// Class of every stacked row, in bank order.
    pub fn row_classes(&self) -> Vec<usize> {
        self.heads.iter().flat_map(|h| h.classes.clone()).collect()
    }

    /// All seen classes, ascending.
    pub fn seen_classes(&self) -> Vec<usize> {
        let mut c = self.row_classes();
        c.sort_unstable();
        c
    }

    /// Every head's rows stacked in bank order.
    pub fn stacked(&self) -> Result<Tensor> {
        let dim = self.dim()?;
        let data: Vec<f32> = self.heads.iter().flat_map(|h| h.weights.data().to_vec()).collect();
        Tensor::new(vec![data.len() / dim, dim], data)
    }

    fn dim(&self) -> Result<usize> {
        match self.heads.first() {
            Some(h) => Ok(h.weights.cols()),
            None => contract("head bank is empty"),
        }
    }

    /// Cosine similarity between `feature` and every class row, ascending class id.
    pub fn cosine_logits(&self, feature: &[f32]) -> Result<Vec<(usize, f32)>> {
        let dim = self.dim()?;
        if feature.len() != dim {
            return Err(Error::Dimension {
                op: "cosine_logits",
                lhs: vec![feature.len()],
                rhs: vec![dim],
            });
        }
        let fnorm = norm(feature);
        if !(fnorm > 0.0) {
            return contract("degenerate cosine: zero-norm feature");
        }
        let mut out = Vec::new();
        for h in &self.heads {
            for (i, &class) in h.classes.iter().enumerate() {
                let w = h.weights.row(i);
                let wnorm = norm(w);
                if !(wnorm > 0.0) {
                    return contract(format!("degenerate cosine: zero-norm weight for class {class}"));
                }
                let dot: f32 = w.iter().zip(feature).map(|(a, b)| a * b).sum();
                out.push((class, dot / (wnorm * fnorm)));
            }
        }
        out.sort_by_key(|&(c, _)| c);
        Ok(out)
    }

    /// Argmax of the cosine logits; ties go to the lowest class id.
    pub fn predict_feature(&self, feature: &[f32]) -> Result<usize> {
        let logits = self.cosine_logits(feature)?;
        let mut best = logits[0];
        for &(c, v) in &logits[1..] {
            if v > best.1 {
                best = (c, v);
            }
        }
        Ok(best.0)
    }
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}
