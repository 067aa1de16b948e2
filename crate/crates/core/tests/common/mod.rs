//! Independent f64 reference implementations and scenario builders shared by
//! the integration tests.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tscil::model::{
    adapter_forward, loss_ce_unified, loss_cos, loss_dc, loss_kd, CosineHead, HeadBank,
};
use tscil::tensor::{Graph, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>())
        .map(|r| r.into_iter().map(|v: f64| v as f32 as f64).collect())
        .collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    let rows: Vec<Vec<f32>> = m.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn unflat(x: &[f64], cols: usize) -> Mat {
    x.chunks(cols).map(|c| c.to_vec()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn log_softmax_ce(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Mean cross-entropy of `s · (cos(f_i, w_j) − m·[j = y_i])`.
pub fn ref_cos_loss(f: &Mat, w: &Mat, labels: &[usize], s: f64, m: f64) -> f64 {
    let total: f64 = f
        .iter()
        .zip(labels)
        .map(|(fi, &y)| {
            let logits: Vec<f64> = w
                .iter()
                .enumerate()
                .map(|(j, wj)| {
                    let dot: f64 = fi.iter().zip(wj).map(|(a, b)| a * b).sum();
                    let cos = dot / (norm(fi) * norm(wj));
                    s * (cos - if j == y { m } else { 0.0 })
                })
                .collect();
            log_softmax_ce(&logits, y)
        })
        .sum();
    total / f.len() as f64
}

/// Mean cross-entropy of linear logits `f_i · w_j`.
pub fn ref_ce_loss(f: &Mat, w: &Mat, labels: &[usize]) -> f64 {
    let total: f64 = f
        .iter()
        .zip(labels)
        .map(|(fi, &y)| {
            let logits: Vec<f64> =
                w.iter().map(|wj| fi.iter().zip(wj).map(|(a, b)| a * b).sum()).collect();
            log_softmax_ce(&logits, y)
        })
        .sum();
    total / f.len() as f64
}

/// `mean_i ‖a_i − b_i‖²`.
pub fn ref_kd(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
        .sum::<f64>()
        / a.len() as f64
}

/// `mean_i ‖W a_i − b_i‖²`.
pub fn ref_dc(w: &Mat, a: &Mat, b: &Mat) -> f64 {
    let mapped: Mat = a
        .iter()
        .map(|ai| w.iter().map(|wr| wr.iter().zip(ai).map(|(p, q)| p * q).sum()).collect())
        .collect();
    ref_kd(&mapped, b)
}

/// `Σ (x + relu(s · x D) U)²` and the smallest `|s · x D|` (distance to the
/// relu kink).
pub fn ref_adapter_energy(x: &Mat, down: &Mat, up: &Mat, s: f64) -> (f64, f64) {
    let r = down[0].len();
    let mut energy = 0.0;
    let mut kink = f64::INFINITY;
    for xi in x {
        let h: Vec<f64> = (0..r)
            .map(|k| s * xi.iter().zip(down).map(|(a, row)| a * row[k]).sum::<f64>())
            .collect();
        for v in &h {
            kink = kink.min(v.abs());
        }
        for (j, &xj) in xi.iter().enumerate() {
            let o = xj + h.iter().zip(up).map(|(hk, row)| hk.max(0.0) * row[j]).sum::<f64>();
            energy += o * o;
        }
    }
    (energy, kink)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b)).max(1e-12);
    norm(&diff) / scale
}

pub fn single_head_bank(w: &Mat, s: f32, m: f32) -> HeadBank {
    let mut bank = HeadBank::new(s, m);
    bank.heads.push(CosineHead {
        task: 1,
        classes: (0..w.len()).collect(),
        weights: to_tensor(w),
    });
    bank
}

/// Worst relative error between engine gradients and central differences of
/// the f64 references, per loss, over `instances` random problems with D = 8.
pub fn gradient_check(instances: usize, seed: u64, h: f64) -> Vec<(&'static str, f64)> {
    const D: usize = 8;
    const B: usize = 4;
    const K: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = vec![("L_cos", 0.0f64), ("L_kd", 0.0), ("L_dc", 0.0), ("L_ce", 0.0), ("adapter", 0.0)];
    let mut adapter_checked = 0;
    let mut bump = |k: usize, e: f64| worst[k].1 = worst[k].1.max(e);
    for _ in 0..instances {
        let f = random_mat(B, D, &mut rng);
        let w = random_mat(K, D, &mut rng);
        let labels: Vec<usize> = (0..B).map(|i| i % K).collect();
        let (s, m) = (10.0f32, 0.1f32);

        // cosine margin loss: gradients w.r.t. features and head weights
        let bank = single_head_bank(&w, s, m);
        let mut g = Graph::new();
        let fv = g.leaf(&to_tensor(&f).with_grad(true));
        let wv = g.leaf(&bank.heads[0].weights.clone().with_grad(true));
        let l = loss_cos(&mut g, fv, &[wv], &bank, &labels, 1).unwrap();
        let grads = g.grad(l, &[fv, wv]).unwrap();
        let fd_f = central_diff(
            |x| ref_cos_loss(&unflat(x, D), &w, &labels, s as f64, m as f64),
            &flat_mat(&f),
            h,
        );
        let fd_w = central_diff(
            |x| ref_cos_loss(&f, &unflat(x, D), &labels, s as f64, m as f64),
            &flat_mat(&w),
            h,
        );
        bump(0, rel_err(&flat(&grads[0]), &fd_f).max(rel_err(&flat(&grads[1]), &fd_w)));

        // distillation: gradient w.r.t. the current features
        let old = random_mat(B, D, &mut rng);
        let mut g = Graph::new();
        let ov = g.constant(&to_tensor(&old));
        let nv = g.leaf(&to_tensor(&f).with_grad(true));
        let l = loss_kd(&mut g, ov, nv).unwrap();
        let grads = g.grad(l, &[nv]).unwrap();
        let fd = central_diff(|x| ref_kd(&old, &unflat(x, D)), &flat_mat(&f), h);
        bump(1, rel_err(&flat(&grads[0]), &fd));

        // drift compensation: gradients w.r.t. W and the current features
        let wd = random_mat(D, D, &mut rng);
        let mut g = Graph::new();
        let wv = g.leaf(&to_tensor(&wd).with_grad(true));
        let ov = g.constant(&to_tensor(&old));
        let nv = g.leaf(&to_tensor(&f).with_grad(true));
        let l = loss_dc(&mut g, wv, ov, nv).unwrap();
        let grads = g.grad(l, &[wv, nv]).unwrap();
        let fd_w = central_diff(|x| ref_dc(&unflat(x, D), &old, &f), &flat_mat(&wd), h);
        let fd_n = central_diff(|x| ref_dc(&wd, &old, &unflat(x, D)), &flat_mat(&f), h);
        bump(2, rel_err(&flat(&grads[0]), &fd_w).max(rel_err(&flat(&grads[1]), &fd_n)));

        // unified linear cross-entropy: gradient w.r.t. every head row
        let bank = single_head_bank(&w, s, m);
        let mut g = Graph::new();
        let fv = g.constant(&to_tensor(&f));
        let wv = g.leaf(&bank.heads[0].weights.clone().with_grad(true));
        let l = loss_ce_unified(&mut g, fv, &[wv], &bank, &labels).unwrap();
        let grads = g.grad(l, &[wv]).unwrap();
        let fd = central_diff(|x| ref_ce_loss(&f, &unflat(x, D), &labels), &flat_mat(&w), h);
        bump(3, rel_err(&flat(&grads[0]), &fd));

        // adapter: gradients w.r.t. both projections, away from the relu kink
        let down = random_mat(D, 2, &mut rng);
        let up = random_mat(2, D, &mut rng);
        let scale = 0.7;
        let (_, kink) = ref_adapter_energy(&f, &down, &up, scale);
        if kink > 10.0 * h {
            adapter_checked += 1;
            let mut g = Graph::new();
            let xv = g.constant(&to_tensor(&f));
            let dv = g.leaf(&to_tensor(&down).with_grad(true));
            let uv = g.leaf(&to_tensor(&up).with_grad(true));
            let out = adapter_forward(&mut g, xv, dv, uv, scale as f32).unwrap();
            let l = g.sum_squares(out);
            let grads = g.grad(l, &[dv, uv]).unwrap();
            let fd_d = central_diff(
                |x| ref_adapter_energy(&f, &unflat(x, 2), &up, scale).0,
                &flat_mat(&down),
                h,
            );
            let fd_u = central_diff(
                |x| ref_adapter_energy(&f, &down, &unflat(x, D), scale).0,
                &flat_mat(&up),
                h,
            );
            bump(4, rel_err(&flat(&grads[0]), &fd_d).max(rel_err(&flat(&grads[1]), &fd_u)));
        }
    }
    if adapter_checked == 0 {
        worst[4].1 = f64::INFINITY;
    }
    worst
}

pub fn flat_mat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn synthetic_stream(
    classes: usize,
    channels: usize,
    length: usize,
    n_per_class: usize,
    noise: f32,
    seed: u64,
) -> tscil::data::TaskStream {
    let mut cfg = tscil::data::SyntheticConfig::new(classes, channels, length, n_per_class);
    cfg.noise_std = noise;
    let samples = tscil::data::make_synthetic(&cfg, seed).unwrap();
    tscil::data::split_tasks(&samples, classes, seed).unwrap()
}

/// A few epochs per stage; enough to exercise every code path quickly.
pub fn quick_config(method: tscil::protocol::Method) -> tscil::protocol::StrategyConfig {
    let mut cfg = tscil::protocol::StrategyConfig::new(method);
    cfg.model.embed_dim = 16;
    cfg.model.r = 4;
    cfg.train.epochs_s1 = 3;
    cfg.train.epochs_s2 = 3;
    cfg.train.epochs_s3 = 3;
    cfg.train.s_n = 32;
    cfg
}

/// Noisy stream on which learned features keep moving between tasks, with an
/// extra random linear map composed onto the extractor at every task.
pub fn drifting_config(method: tscil::protocol::Method) -> tscil::protocol::StrategyConfig {
    let mut cfg = tscil::protocol::StrategyConfig::new(method);
    cfg.induced_drift = tscil::protocol::InducedDrift::Linear { strength: 0.5 };
    cfg
}
