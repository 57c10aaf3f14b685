mod common;

use common::{gradient_error, kernel, prediction_error, random_problem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softnav::gpr::{self, log_marginal_likelihood, FitOptions, GprModel, InitParams, TrainingSet};

#[test]
fn prediction_matches_dense_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let pr = random_problem(&mut rng, 50, 5);
        let err = prediction_error(&pr, 5, &mut rng);
        assert!(err <= 1e-8, "relative error {err}");
    }
}

#[test]
fn lml_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let pr = random_problem(&mut rng, 30, 4);
        let err = gradient_error(&pr);
        assert!(err < 1e-5, "gradient gap {err}");
    }
}

#[test]
fn lml_matches_dense_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let pr = random_problem(&mut rng, 25, 3);
        let n = pr.inputs.len();
        let x = DMatrix::from_fn(n, pr.params.dim(), |i, j| pr.inputs[i][j]);
        let y = DVector::from_column_slice(&pr.targets);
        let ts = TrainingSet::unscaled(pr.inputs.clone(), pr.targets.clone()).unwrap();
        let jitter = GprModel::with_params(ts, pr.params.clone()).unwrap().jitter();
        let k = DMatrix::from_fn(n, n, |i, j| {
            kernel(&pr.inputs[i], &pr.inputs[j], &pr.params) + if i == j { pr.params.sigma_eps2 + jitter } else { 0.0 }
        });
        let det = k.clone().lu().determinant();
        let quad = (y.transpose() * k.lu().try_inverse().unwrap() * &y)[0];
        let expected = -0.5 * quad - 0.5 * det.ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        let (value, _) = log_marginal_likelihood(&x, &y, &pr.params).unwrap();
        assert!((value - expected).abs() < 1e-8 * expected.abs().max(1.0), "{value} vs {expected}");
    }
}

#[test]
fn fit_improves_likelihood_over_initial_guess() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inputs: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(0.0..10.0), rng.random_range(0.0..1.0)]).collect();
    let targets: Vec<f64> = inputs.iter().map(|x| (x[0] * 0.7).sin() * 3.0 + 0.05 * rng.random_range(-1.0..1.0)).collect();
    let ts = TrainingSet::new(inputs, targets).unwrap();
    let start = gpr::auto_init(&ts);
    let base = GprModel::with_params(ts.clone(), start).unwrap().log_marginal_likelihood();
    let (model, report) = gpr::fit_with_report(ts, &InitParams::Auto, &FitOptions::default()).unwrap();
    assert!(model.log_marginal_likelihood() >= base);
    assert_eq!(report.restart_lml.len(), 5);
    // the irrelevant second input should get a longer length scale than the first
    let l = &model.params().length_scales;
    assert!(l[1] > l[0], "{l:?}");
}
