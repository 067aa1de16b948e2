mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tscil::model::{loss_ce_unified, loss_cos, loss_dc, loss_kd};
use tscil::tensor::Graph;

#[test]
fn analytic_gradients_match_finite_differences() {
    for (name, err) in gradient_check(20, 7, 1e-3) {
        assert!(err < 1e-3, "{name}: relative error {err:e}");
    }
}

#[test]
fn loss_values_match_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let f = random_mat(5, 8, &mut rng);
        let old = random_mat(5, 8, &mut rng);
        let w = random_mat(3, 8, &mut rng);
        let wd = random_mat(8, 8, &mut rng);
        let labels = [0, 1, 2, 0, 1];
        let bank = single_head_bank(&w, 16.0, 0.2);

        let mut g = Graph::new();
        let fv = g.constant(&to_tensor(&f));
        let ov = g.constant(&to_tensor(&old));
        let wv = g.constant(&to_tensor(&w));
        let dv = g.constant(&to_tensor(&wd));
        let cos = loss_cos(&mut g, fv, &[wv], &bank, &labels, 1).unwrap();
        let ce = loss_ce_unified(&mut g, fv, &[wv], &bank, &labels).unwrap();
        let kd = loss_kd(&mut g, ov, fv).unwrap();
        let dc = loss_dc(&mut g, dv, ov, fv).unwrap();

        let close = |a: f32, b: f64| ((a as f64) - b).abs() <= 1e-4 * b.abs().max(1.0);
        let r = ref_cos_loss(&f, &w, &labels, 16.0, 0.2f32 as f64);
        assert!(close(g.data(cos)[0], r), "cos {} vs {r}", g.data(cos)[0]);
        let r = ref_ce_loss(&f, &w, &labels);
        assert!(close(g.data(ce)[0], r), "ce {} vs {r}", g.data(ce)[0]);
        let r = ref_kd(&old, &f);
        assert!(close(g.data(kd)[0], r), "kd {} vs {r}", g.data(kd)[0]);
        let r = ref_dc(&wd, &old, &f);
        assert!(close(g.data(dc)[0], r), "dc {} vs {r}", g.data(dc)[0]);
    }
}

#[test]
fn gradient_check_is_seed_independent() {
    for seed in [1, 2, 3] {
        for (name, err) in gradient_check(5, seed, 1e-3) {
            assert!(err < 1e-3, "seed {seed} {name}: {err:e}");
        }
    }
}
