use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tscil::dcn::DriftCompensator;
use tscil::tensor::{SgdConfig, Tensor};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, cols], |_| StandardNormal.sample(&mut rng))
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_fn(t.rows(), t.cols(), |i, j| t.data()[i * t.cols() + j] as f64)
}

/// Least-squares solution of `min_W Σ ‖W a_i − b_i‖²`.
fn least_squares(old: &Tensor, new: &Tensor) -> DMatrix<f64> {
    let a = to_matrix(old);
    let b = to_matrix(new);
    let gram = a.transpose() * &a;
    (gram.try_inverse().expect("full rank") * a.transpose() * b).transpose()
}

fn fit_cfg(epochs: usize) -> SgdConfig {
    SgdConfig {
        max_lr: 0.02,
        batch_size: 16,
        epochs_per_stage: epochs,
        momentum: 0.9,
    }
}

#[test]
fn fit_approaches_least_squares_solution() {
    let d = 6;
    let old = gaussian(200, d, 1);
    let truth = gaussian(d, d, 2);
    let noise = gaussian(200, d, 3);
    let mut new = old.matmul(&truth.transpose().unwrap()).unwrap();
    for (v, e) in new.data_mut().iter_mut().zip(noise.data()) {
        *v += 0.05 * e;
    }
    let oracle = least_squares(&old, &new);
    let mut dcn = DriftCompensator::new(d);
    let report = dcn.fit_features(&old, &new, &fit_cfg(150), 4).unwrap();
    assert!(report.loss_after < report.loss_before);
    let w = to_matrix(&dcn.weight);
    let rel = (&w - &oracle).norm() / oracle.norm();
    assert!(rel < 1e-2, "relative distance to least squares {rel}");
}

#[test]
fn recovers_exact_doubling_on_held_out_features() {
    let d = 8;
    let old = gaussian(160, d, 10);
    let new = Tensor::from_fn(old.shape(), |i| 2.0 * old.data()[i]);
    let mut dcn = DriftCompensator::new(d);
    dcn.fit_features(&old, &new, &fit_cfg(200), 0).unwrap();
    let held = gaussian(50, d, 11);
    let mapped = dcn.apply_rows(&held).unwrap();
    let num: f64 = mapped
        .data()
        .iter()
        .zip(held.data())
        .map(|(&m, &h)| (m as f64 - 2.0 * h as f64).powi(2))
        .sum();
    let den: f64 = held.data().iter().map(|&h| (2.0 * h as f64).powi(2)).sum();
    let residual = (num / den).sqrt();
    assert!(residual < 1e-2, "held-out relative residual {residual}");
}

#[test]
fn no_drift_keeps_identity() {
    let old = gaussian(64, 5, 20);
    let mut dcn = DriftCompensator::new(5);
    let report = dcn.fit_features(&old, &old, &fit_cfg(10), 1).unwrap();
    assert_eq!(report.loss_before, 0.0);
    assert_eq!(dcn.weight.data(), Tensor::identity(5).data());
}

#[test]
fn epoch_losses_trend_down() {
    let old = gaussian(96, 4, 30);
    let truth = gaussian(4, 4, 31);
    let new = old.matmul(&truth.transpose().unwrap()).unwrap();
    let mut dcn = DriftCompensator::new(4);
    let report = dcn.fit_features(&old, &new, &fit_cfg(40), 2).unwrap();
    assert_eq!(report.epoch_losses.len(), 40);
    let first = report.epoch_losses[0];
    let last = *report.epoch_losses.last().unwrap();
    assert!(last < 0.05 * first, "{first} -> {last}");
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut dcn = DriftCompensator::new(3);
    assert!(dcn.fit_features(&gaussian(4, 3, 0), &gaussian(5, 3, 0), &fit_cfg(1), 0).is_err());
    assert!(dcn.apply_rows(&gaussian(4, 2, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_matches_direct_evaluation(seed in 0u64..10_000, d in 1usize..6, n in 1usize..12) {
        let old = gaussian(n, d, seed);
        let new = gaussian(n, d, seed + 1);
        let mut dcn = DriftCompensator::new(d);
        dcn.weight = gaussian(d, d, seed + 2);
        let mapped = dcn.apply_rows(&old).unwrap();
        let direct: f64 = mapped
            .data()
            .iter()
            .zip(new.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / n as f64;
        let loss = dcn.loss(&old, &new).unwrap() as f64;
        prop_assert!((loss - direct).abs() <= 1e-4 * direct.max(1.0));
    }

    #[test]
    fn identity_is_exact(seed in 0u64..10_000, d in 1usize..9) {
        let v: Vec<f32> = gaussian(1, d, seed).into_data();
        prop_assert_eq!(DriftCompensator::new(d).apply(&v).unwrap(), v);
    }
}
