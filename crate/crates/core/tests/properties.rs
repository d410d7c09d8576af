use ndarray::Array2;

use xai_ran_core::explain::{explain_ig, explain_shap, shapley_exact, Attribution, BaselineSpec};
use xai_ran_core::fidelity::{local_r2, topk_cells, topk_fidelity, NeighborhoodConfig};
use xai_ran_core::model::{ModelParams, Normalizer, Predictor};
use xai_ran_core::ExecMode;

fn toy(w: usize, n: usize, seed: u64) -> Predictor {
    let norm = Normalizer::fit(
        [Array2::from_shape_fn((w, n), |(t, i)| (t * 3 + i * 5) as f64 * 0.29)].iter().map(|m| m.view()),
        0,
    );
    Predictor::new(ModelParams::init(n, 8, seed), norm).unwrap()
}

#[test]
fn positive_scaling_keeps_topk_but_moves_local_r2() {
    let p = toy(5, 5, 21);
    let x = Array2::from_shape_fn((5, 5), |(t, i)| ((t * 5 + i) as f64 * 0.61).sin() * 1.3);
    let b = Array2::zeros((5, 5));
    let e = explain_ig(&p, &x, &BaselineSpec::NormalizedZero, 64).unwrap();
    let cfg = NeighborhoodConfig::default();
    let base_topk = topk_fidelity(&p, &x, &e, 0.8, &b).unwrap();
    let base_r2 = local_r2(&p, &x, &b, &e, &cfg).unwrap().raw;
    let mut moved = false;
    for c in [0.5, 3.0, 17.0] {
        let s = scaled(&e, c);
        assert_eq!(topk_cells(&s.e, 0.8), topk_cells(&e.e, 0.8));
        let t = topk_fidelity(&p, &x, &s, 0.8, &b).unwrap();
        assert_eq!((t.k_used, t.phi), (base_topk.k_used, base_topk.phi));
        moved |= local_r2(&p, &x, &b, &s, &cfg).unwrap().raw != base_r2;
    }
    assert!(moved);
}

fn scaled(e: &Attribution, c: f64) -> Attribution {
    Attribution {
        e: e.e.mapv(|v| v * c),
        ..e.clone()
    }
}

#[test]
fn permutation_shap_is_unbiased_on_small_input() {
    let p = toy(2, 3, 5);
    let x = Array2::from_shape_fn((2, 3), |(t, i)| 0.9 - (t * 3 + i) as f64 * 0.35);
    let exact = shapley_exact(&p, &x, &BaselineSpec::NormalizedZero).unwrap().e;
    let runs: Vec<Array2<f64>> = (0..50)
        .map(|s| {
            explain_shap(&p, &x, &BaselineSpec::NormalizedZero, 16, 1000 + s, ExecMode::Sequential)
                .unwrap()
                .attribution
                .e
        })
        .collect();
    let n = runs.len() as f64;
    let mean: Array2<f64> = runs.iter().fold(Array2::zeros(x.dim()), |a, r| a + r) / n;
    for (cell, &m) in mean.indexed_iter() {
        let var = runs.iter().map(|r: &Array2<f64>| (r[cell] - m).powi(2_i32)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!((m - exact[cell]).abs() <= 3.0 * se + 1e-12, "cell {cell:?}: {m} vs {}", exact[cell]);
    }
}
