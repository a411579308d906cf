//! Worked examples for the public API, one small instance each.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ncdl::linalg::{centering, etf_gram, gaussian_matrix, simplex_etf, DenseMatrix};
use ncdl::metrics::{
    class_means, compare_to_theory, measure, nc1, nc2_etf, nc2_gof, nc2_of, nc3, nc3_gof, Flavor,
};
use ncdl::model::{
    balance_residuals, end_to_end, forward, gradient, init_state, loss, optimal_features_given_weights,
    target_matrix, trailing_products, BiasMode, LossKind, NetworkState, ProblemSpec,
};
use ncdl::theory::{
    construct_canonical_minimizer, minority_collapse_threshold, norm_ratios, predict,
    predict_balanced, predict_ce_balanced, predict_imbalanced_deep, predict_imbalanced_plain,
    BiasPrediction, Geometry, Regime, TieBranch,
};
use ncdl::trainer::{sweep, train, TrainConfig};

fn mse(counts: Vec<usize>, widths: Vec<usize>, lambda: f64) -> ProblemSpec {
    let depth = widths.len();
    ProblemSpec::new(counts, widths, LossKind::Mse, BiasMode::None, vec![lambda; depth], lambda).unwrap()
}

#[test]
fn init_statistics() {
    let spec = mse(vec![1000, 1000], vec![500], 1e-3);
    let state = init_state(&spec, 11);
    let values: Vec<f64> = state.features.data().to_vec();
    assert_eq!(values.len(), 1_000_000);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 3.0 * 0.1 / n.sqrt(), "mean {mean}");
    assert!((std - 0.1).abs() < 1e-3, "std {std}");
    assert_ne!(init_state(&spec, 0), init_state(&spec, 1));
}

#[test]
fn forward_examples() {
    let spec = mse(vec![1, 1, 1], vec![3], 0.1);
    let zero = NetworkState::zeros(&spec);
    assert_eq!(forward(&zero, &spec).unwrap().max_abs(), 0.0);
    let mut s = zero.clone();
    s.weights[0] = DenseMatrix::identity(3);
    s.features = target_matrix(&spec);
    assert_eq!(forward(&s, &spec).unwrap(), target_matrix(&spec));
}

#[test]
fn zero_state_losses() {
    let spec = mse(vec![3, 2], vec![4, 4], 0.3);
    assert_eq!(loss(&NetworkState::zeros(&spec), &spec).unwrap(), 0.5);
    let ce = spec.with_objective(LossKind::CrossEntropy, BiasMode::None).unwrap();
    assert!((loss(&NetworkState::zeros(&ce), &ce).unwrap() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn feature_gradient_vanishes_without_weights() {
    let spec = ProblemSpec::new(vec![2, 2, 2], vec![4, 4, 4], LossKind::Mse, BiasMode::None, vec![0.1; 3], 0.0).unwrap();
    let mut state = init_state(&spec, 3);
    state.weights.iter_mut().for_each(|w| w.scale_in_place(0.0));
    assert_eq!(gradient(&state, &spec).unwrap().features.max_abs(), 0.0);
}

#[test]
fn finite_differences_on_three_layers() {
    let spec = ProblemSpec::new(vec![2, 2, 2], vec![4, 4, 4], LossKind::Mse, BiasMode::None, vec![0.01; 3], 0.01).unwrap();
    let state = init_state(&spec, 42);
    let g = gradient(&state, &spec).unwrap().flat_values();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, &an) in g.iter().enumerate() {
        let mut p = state.clone();
        *p.flat_entry_mut(i) += h;
        let mut m = state.clone();
        *m.flat_entry_mut(i) -= h;
        let fd = (loss(&p, &spec).unwrap() - loss(&m, &spec).unwrap()) / (2.0 * h);
        worst = worst.max((fd - an).abs());
    }
    let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(worst / scale < 1e-6);
}

#[test]
fn optimal_feature_examples() {
    let spec = mse(vec![1, 1, 1], vec![3], 1.0 / 3.0);
    let zeros = vec![DenseMatrix::zeros(3, 3)];
    assert_eq!(optimal_features_given_weights(&zeros, None, &spec).unwrap().max_abs(), 0.0);
    let eye = vec![DenseMatrix::identity(3)];
    let h = optimal_features_given_weights(&eye, None, &spec).unwrap();
    assert!(h.sub(&target_matrix(&spec).scale(0.5)).max_abs() < 1e-15);

    let deep = mse(vec![3, 2, 2], vec![5, 4], 2e-2);
    let mut state = init_state(&deep, 9);
    state.features = optimal_features_given_weights(&state.weights, None, &deep).unwrap();
    assert!(gradient(&state, &deep).unwrap().features.frobenius_norm() < 1e-9);
}

#[test]
fn balance_residual_examples() {
    let spec = mse(vec![10; 4], vec![6, 6, 6], 5e-3);
    let pred = predict(&spec).unwrap();
    let state = construct_canonical_minimizer(&spec, &pred, 0, TieBranch::Nontrivial).unwrap();
    assert!(balance_residuals(&state, &spec).unwrap().iter().all(|&r| r < 1e-8));
    assert!(balance_residuals(&init_state(&spec, 0), &spec).unwrap().iter().all(|&r| r > 0.0));

    let mut bumped = state.clone();
    bumped.weights[0].scale_in_place(2.0);
    let last = *balance_residuals(&bumped, &spec).unwrap().last().unwrap();
    let expect = 3.0 * 5e-3 * state.weights[0].gram_cols().frobenius_norm();
    assert!((last - expect).abs() < 1e-8 * expect.max(1.0));
}

#[test]
fn balanced_prediction_examples() {
    let spec = mse(vec![100; 4], vec![64; 3], 5e-4);
    let pred = predict_balanced(&spec).unwrap();
    let a = 4.0 * (400.0 * 5e-4f64.powi(4)).cbrt();
    // the stored constant is the class-count-scaled one: n·a
    assert!((pred.a.unwrap() / 100.0 - a).abs() < 1e-12 * a);
    assert!((a - 1.170e-3).abs() < 1e-6);
    assert!((pred.class_b[0] - 3.0 * a).abs() < 1e-12 * a);
    assert!(a < 4f64.cbrt() / 9.0);
    assert_eq!(pred.regime.label(), "nontrivial");
    assert_eq!(pred.geometry, Geometry::Of);

    let heavy = mse(vec![1; 3], vec![3; 3], 1.0);
    let pred = predict_balanced(&heavy).unwrap();
    assert_eq!(pred.regime, Regime::FullCollapse);
    assert_eq!(pred.geometry, Geometry::Zero);
    assert!(pred.singular_values.iter().all(|&s| s == 0.0));
    assert_eq!(pred.predicted_loss, Some(0.5));

    let three = mse(vec![20; 3], vec![5; 2], 1e-3);
    let g = predict_balanced(&three).unwrap().target_w_gram;
    let d = g.diag();
    assert!(g.sub(&DenseMatrix::identity(3).scale(d[0])).max_abs() < 1e-12 * d[0]);
}

#[test]
fn plain_imbalanced_examples() {
    let spec = mse(vec![200, 100, 50, 50], vec![4], 5e-4);
    let pred = predict_imbalanced_plain(&spec).unwrap();
    let s1 = (200f64.sqrt() - 0.2).sqrt();
    assert!((pred.singular_values[0] - s1).abs() < 1e-12);
    assert!((s1 - 3.7339).abs() < 1e-4);

    let collapsed = mse(vec![2000, 495, 495, 10], vec![16], 2e-3);
    let pred = predict_imbalanced_plain(&collapsed).unwrap();
    assert_eq!(pred.singular_values[3], 0.0);
    let state = construct_canonical_minimizer(&collapsed, &pred, 1, TieBranch::Nontrivial).unwrap();
    let (means, _) = class_means(&state.features, &collapsed).unwrap();
    assert!(state.weights[0].row(3).iter().all(|&v| v.abs() < 1e-12));
    assert!(means.col(3).iter().all(|&v| v.abs() < 1e-12));

    let balanced = mse(vec![50; 3], vec![4], 1e-3);
    let pred = predict_imbalanced_plain(&balanced).unwrap();
    let s = &pred.singular_values;
    assert!(s.iter().all(|&v| (v - s[0]).abs() < 1e-14 && v > 0.0));
}

#[test]
fn deep_imbalanced_examples() {
    let spec = mse(vec![200, 100, 50, 50], vec![8; 3], 5e-4);
    let pred = predict_imbalanced_deep(&spec).unwrap();
    assert!((pred.a.unwrap() - 0.1170).abs() < 1e-4);
    assert_eq!(pred.regime, Regime::AllActive);
    let x = &pred.x_star;
    assert!(x[0] > x[1] && x[1] > x[2]);
    assert_eq!(x[2], x[3]);

    let same = mse(vec![30; 4], vec![6; 3], 5e-3);
    let deep = predict_imbalanced_deep(&same).unwrap();
    let bal = predict_balanced(&same).unwrap();
    for (a, b) in deep.singular_values.iter().zip(&bal.singular_values) {
        assert!((a - b).abs() < 1e-10);
    }

    let starved = mse(vec![1000, 1000, 1], vec![4; 2], 1e-2);
    let pred = predict_imbalanced_deep(&starved).unwrap();
    assert_eq!(pred.regime, Regime::PartialCollapse(2));
    assert_eq!(pred.singular_values[2], 0.0);
}

#[test]
fn ce_prediction_examples() {
    for k in [2, 5] {
        let spec = ProblemSpec::new(vec![10; k], vec![6, 6], LossKind::CrossEntropy, BiasMode::LastLayerUnregularized, vec![1e-3; 2], 1e-3).unwrap();
        let pred = predict_ce_balanced(&spec).unwrap();
        let g = &pred.target_product_gram;
        let normalized = g.scale(1.0 / g.frobenius_norm());
        let expect = centering(k).scale(1.0 / ((k - 1) as f64).sqrt());
        assert!(normalized.sub(&expect).max_abs() < 1e-14);
        assert_eq!(pred.bias, BiasPrediction::Constant);
        assert!(pred.singular_values.is_empty());
    }
}

#[test]
fn minority_collapse_examples() {
    let spec = mse(vec![2000, 495, 495, 10], vec![16], 2e-3);
    assert_eq!(minority_collapse_threshold(&spec).unwrap(), vec![false, false, false, true]);
    let tiny = mse(vec![2000, 495, 495, 10], vec![16], 1e-9);
    assert!(minority_collapse_threshold(&tiny).unwrap().iter().all(|f| !f));
    let heavy = mse(vec![5; 3], vec![4], 0.5);
    assert!(minority_collapse_threshold(&heavy).unwrap().iter().all(|&f| f));
}

#[test]
fn norm_ratio_monotonicity() {
    let spec = mse(vec![200, 100, 50, 50], vec![4], 5e-4);
    let r = norm_ratios(&spec).unwrap();
    assert!((r.classifier[2][3] - 1.0).abs() < 1e-15);
    assert!((r.feature[2][3] - 1.0).abs() < 1e-15);
    for i in 0..4 {
        for j in i..4 {
            assert!(r.classifier[i][j] >= 1.0 - 1e-15);
            assert!(r.feature[i][j] <= 1.0 + 1e-15);
        }
    }
}

#[test]
fn class_mean_examples() {
    let spec = mse(vec![3, 2, 1], vec![2], 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = gaussian_matrix(2, 6, &mut rng);
    let (means, global) = class_means(&h, &spec).unwrap();
    for r in 0..2 {
        let weighted = (3.0 * means[(r, 0)] + 2.0 * means[(r, 1)] + means[(r, 2)]) / 6.0;
        assert!((weighted - global[r]).abs() < 1e-15);
    }
}

#[test]
fn nc_metric_examples() {
    let spec = mse(vec![2, 2, 2], vec![3], 0.1);
    let means = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]);
    let collapsed = DenseMatrix::from_fn(3, 6, |r, c| means[(r, c / 2)]);
    assert_eq!(nc1(&collapsed, &spec).unwrap(), 0.0);

    let w = DenseMatrix::from_diag(&[2.0, 1.0]);
    let got = nc2_of(std::slice::from_ref(&w), 2).unwrap()[0];
    let direct = DenseMatrix::from_diag(&[4.0, 1.0])
        .scale(1.0 / 17f64.sqrt())
        .sub(&DenseMatrix::identity(2).scale(1.0 / 2f64.sqrt()))
        .frobenius_norm();
    assert!((got - direct).abs() < 1e-15);
    assert!(nc2_of(&[w.scale(-7.5)], 2).unwrap()[0] - got < 1e-14);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let partial = ncdl::linalg::random_orthonormal(5, 3, &mut rng).transpose();
    assert!(nc2_of(&[partial], 3).unwrap()[0] < 1e-14);

    let etf = simplex_etf(4).unwrap();
    assert!(nc2_etf(std::slice::from_ref(&etf), 4).unwrap()[0] < 1e-14);
    assert!(nc2_etf(&[DenseMatrix::identity(4)], 4).unwrap()[0] > 0.1);
    let base = nc2_etf(std::slice::from_ref(&w), 2).unwrap()[0];
    assert!((nc2_etf(&[w.scale(3.0)], 2).unwrap()[0] - base).abs() < 1e-14);

    let p = gaussian_matrix(3, 4, &mut rng);
    let m = gaussian_matrix(4, 3, &mut rng);
    let v = nc3(&p, &m, Flavor::Of).unwrap();
    assert!((nc3(&p.scale(4.0), &m.scale(0.1), Flavor::Of).unwrap() - v).abs() < 1e-14);
    let centered = centering(3).scale(2.5);
    assert!(nc3(&centered, &DenseMatrix::identity(3), Flavor::Etf).unwrap() < 1e-14);
    assert!(etf_gram(3).unwrap().trace() - 3.0 < 1e-14);
}

#[test]
fn gof_metric_examples() {
    let spec = mse(vec![20; 3], vec![5], 1e-3);
    let pred = predict(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = gaussian_matrix(3, 5, &mut rng);
    let gof = nc2_gof(&w, &pred).unwrap();
    assert!((gof - nc2_of(std::slice::from_ref(&w), 3).unwrap()[0]).abs() < 1e-14);

    let mut doubled = pred.clone();
    doubled.singular_values.iter_mut().for_each(|s| *s *= 2.0);
    doubled.product_singular_values.iter_mut().for_each(|s| *s *= 2.0);
    doubled.target_product_gram.scale_in_place(4.0);
    doubled.target_wh.scale_in_place(4.0);
    assert!((nc2_gof(&w, &doubled).unwrap() - gof).abs() < 1e-14);

    let imb = mse(vec![40, 20, 10], vec![5, 5], 1e-3);
    let pred = predict(&imb).unwrap();
    let state = construct_canonical_minimizer(&imb, &pred, 3, TieBranch::Nontrivial).unwrap();
    let product = end_to_end(&state.weights);
    let (means, _) = class_means(&state.features, &imb).unwrap();
    assert!(nc2_gof(&product, &pred).unwrap() < 1e-8);
    assert!(nc3_gof(&product, &means, &pred).unwrap() < 1e-8);
    assert_eq!(trailing_products(&state.weights).len(), 2);
}

#[test]
fn theory_comparison_examples() {
    let spec = mse(vec![10; 4], vec![6; 3], 5e-3);
    let pred = predict(&spec).unwrap();
    let zero = NetworkState::zeros(&spec);
    let report = compare_to_theory(&zero, &spec, &pred).unwrap();
    assert!(report.nc3.is_none());
    assert!(measure(&zero, &spec, Flavor::Of, None).unwrap().max_nc().is_none());
    let gap = report.theory.unwrap().loss_gap.unwrap();
    assert!((gap - (0.5 - pred.predicted_loss.unwrap())).abs() < 1e-15);

    let random = compare_to_theory(&init_state(&spec, 0), &spec, &pred).unwrap();
    assert!(random.nc1 > 0.0);
    assert!(random.max_nc().unwrap() > 0.0);
    let dev = random.theory.unwrap();
    assert!(dev.loss_gap.unwrap() > 0.0);
    assert!(dev.singular_value_deviation.iter().all(|&d| d > 0.0));
}

#[test]
fn toy_run_reaches_the_predicted_loss() {
    let spec = mse(vec![3, 1], vec![2], 0.05);
    let pred = predict(&spec).unwrap();
    let mut cfg = TrainConfig::new(0.01, 200_000, 0);
    cfg.record_stride = 10_000;
    let traj = train(&spec, &cfg, Some(&pred)).unwrap();
    assert!((traj.final_loss() - pred.predicted_loss.unwrap()).abs() < 1e-6);
}

#[test]
fn sweep_examples() {
    let cfg = TrainConfig::new(0.05, 200, 7);
    let specs = vec![
        mse(vec![5; 3], vec![4], 1e-3),
        mse(vec![6, 4, 2], vec![4, 4], 1e-3),
        ProblemSpec::new(vec![4; 3], vec![4, 3], LossKind::CrossEntropy, BiasMode::LastLayerUnregularized, vec![1e-3; 2], 1e-3).unwrap(),
    ];
    let single = sweep(&specs[..1], &cfg).unwrap();
    let alone = train(&specs[0], &cfg, Some(&predict(&specs[0]).unwrap())).unwrap();
    assert_eq!(single.runs[0].as_ref().unwrap(), &alone);

    let forward_order = sweep(&specs, &cfg).unwrap();
    let reversed: Vec<_> = specs.iter().rev().cloned().collect();
    let backward = sweep(&reversed, &cfg).unwrap();
    assert!(forward_order.failures.is_empty());
    for i in 0..3 {
        assert_eq!(
            forward_order.runs[i].as_ref().unwrap(),
            backward.runs[2 - i].as_ref().unwrap()
        );
    }
    assert_eq!(train(&specs[2], &cfg, None).unwrap(), train(&specs[2], &cfg, None).unwrap());
}
