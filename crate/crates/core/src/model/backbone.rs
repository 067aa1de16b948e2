use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::TimeSeriesSample;
use crate::error::{contract, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Hidden width of each block relative to D.
const HIDDEN_MULT: usize = 2;

/// Residual MLP block: `h + tanh(h W1 + b1) W2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
}

/// Deterministic stand-in for a pretrained encoder. Every weight is frozen.
///
/// A `C × L` series is cut into `⌊L / patch_len⌋` patches, each a flattened
/// `C × patch_len` slab; patches are embedded, passed through the residual
/// blocks and mean-pooled into one D-vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    pub channels: usize,
    pub patch_len: usize,
    pub embed_dim: usize,
    pub embed: Tensor,
    pub embed_bias: Tensor,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub(super) struct BackboneVars {
    embed: Var,
    embed_bias: Var,
    blocks: Vec<(Var, Var, Var)>,
}

fn gaussian(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0f32, std).expect("valid std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl FrozenBackbone {
    pub fn generate(
        channels: usize,
        patch_len: usize,
        embed_dim: usize,
        n_blocks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let patch_dim = channels * patch_len;
        let hidden = HIDDEN_MULT * embed_dim;
        let embed = gaussian(&[patch_dim, embed_dim], (1.0 / patch_dim as f32).sqrt(), rng);
        let embed_bias = gaussian(&[1, embed_dim], 0.1, rng);
        let blocks = (0..n_blocks)
            .map(|_| Block {
                w1: gaussian(&[embed_dim, hidden], (1.0 / embed_dim as f32).sqrt(), rng),
                b1: gaussian(&[1, hidden], 0.1, rng),
                w2: gaussian(&[hidden, embed_dim], (1.0 / hidden as f32).sqrt(), rng),
            })
            .collect();
        Self::from_parts(channels, patch_len, embed, embed_bias, blocks)
    }

    pub(crate) fn from_parts(
        channels: usize,
        patch_len: usize,
        embed: Tensor,
        embed_bias: Tensor,
        blocks: Vec<Block>,
    ) -> Self {
        let embed_dim = embed.shape()[1];
        let freeze = |t: Tensor| t.with_grad(false);
        Self {
            channels,
            patch_len,
            embed_dim,
            embed: freeze(embed),
            embed_bias: freeze(embed_bias),
            blocks: blocks
                .into_iter()
                .map(|b| Block {
                    w1: freeze(b.w1),
                    b1: freeze(b.b1),
                    w2: freeze(b.w2),
                })
                .collect(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.blocks
            .first()
            .map(|b| b.w1.shape()[1])
            .unwrap_or(HIDDEN_MULT * self.embed_dim)
    }

    /// All weight tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed, &self.embed_bias];
        for b in &self.blocks {
            out.extend([&b.w1, &b.b1, &b.w2]);
        }
        out
    }

    /// True when every weight is bit-identical to `other`'s.
    pub fn bit_eq(&self, other: &FrozenBackbone) -> bool {
        self.tensors().len() == other.tensors().len()
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.bit_eq(b))
    }

    pub(super) fn register(&self, g: &mut Graph) -> BackboneVars {
        BackboneVars {
            embed: g.constant(&self.embed),
            embed_bias: g.constant(&self.embed_bias),
            blocks: self
                .blocks
                .iter()
                .map(|b| (g.constant(&b.w1), g.constant(&b.b1), g.constant(&b.w2)))
                .collect(),
        }
    }

    fn patchify(&self, batch: &[&TimeSeriesSample]) -> Result<(Tensor, usize)> {
        let first = batch[0];
        let (c, l) = (first.channels(), first.length());
        if c != self.channels {
            return contract(format!(
                "backbone expects {} channels, sample has {c}",
                self.channels
            ));
        }
        if l < self.patch_len {
            return contract(format!(
                "series length {l} shorter than patch_len {}",
                self.patch_len
            ));
        }
        if batch.iter().any(|s| s.channels() != c || s.length() != l) {
            return contract("batch mixes series shapes");
        }
        let patches = l / self.patch_len;
        let width = c * self.patch_len;
        let mut data = Vec::with_capacity(batch.len() * patches * width);
        for s in batch {
            for p in 0..patches {
                for ch in 0..c {
                    let row = s.values.row(ch);
                    data.extend_from_slice(&row[p * self.patch_len..(p + 1) * self.patch_len]);
                }
            }
        }
        Ok((Tensor::new(vec![batch.len() * patches, width], data)?, patches))
    }

    pub(super) fn forward(
        &self,
        g: &mut Graph,
        vars: &BackboneVars,
        adapters: &[(Var, Var, f32)],
        batch: &[&TimeSeriesSample],
    ) -> Result<Var> {
        if batch.is_empty() {
            return contract("empty batch");
        }
        let (x, patches) = self.patchify(batch)?;
        let x = g.constant(&x);
        let h = g.matmul(x, vars.embed)?;
        let mut h = g.add_row(h, vars.embed_bias)?;
        for (i, &(w1, b1, w2)) in vars.blocks.iter().enumerate() {
            let z = g.matmul(h, w1)?;
            let z = g.add_row(z, b1)?;
            let z = g.tanh(z);
            let z = g.matmul(z, w2)?;
            h = g.add(h, z)?;
            if let Some(&(down, up, scale)) = adapters.get(i) {
                h = super::adapter_forward(g, h, down, up, scale)?;
            }
        }
        let b = batch.len();
        let inv = 1.0 / patches as f32;
        let mut pool = Tensor::zeros(&[b, b * patches]);
        for i in 0..b {
            pool.data_mut()[i * b * patches + i * patches..i * b * patches + (i + 1) * patches]
                .fill(inv);
        }
        let pool = g.constant(&pool);
        g.matmul(pool, h)
    }
}
