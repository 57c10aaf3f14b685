//! Helpers shared by the oracle and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use softnav::gpr::{log_marginal_likelihood, GprModel, KernelParams, TrainingSet};

pub struct Problem {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub params: KernelParams,
}

pub fn random_problem(rng: &mut ChaCha8Rng, max_n: usize, max_r: usize) -> Problem {
    let n = rng.random_range(2..=max_n);
    let r = rng.random_range(1..=max_r);
    let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..r).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let targets = inputs.iter().map(|x| x.iter().map(|v| v.sin()).sum::<f64>() + rng.random_range(-0.1..0.1)).collect();
    let params = KernelParams::new(
        rng.random_range(0.5..2.0),
        (0..r).map(|_| rng.random_range(0.5..3.0)).collect(),
        rng.random_range(0.05..1.0),
    )
    .unwrap();
    Problem { inputs, targets, params }
}

/// Matern-3/2 ARD written out term by term.
pub fn kernel(a: &[f64], b: &[f64], p: &KernelParams) -> f64 {
    let tau = a
        .iter()
        .zip(b)
        .zip(&p.length_scales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum::<f64>()
        .sqrt();
    p.sigma_f2 * (1.0 + 3f64.sqrt() * tau) * (-(3f64.sqrt()) * tau).exp()
}

/// Predictive moments from an explicit LU inverse of the noisy Gram matrix.
pub fn dense_predict(pr: &Problem, extra_diag: f64, x: &[f64]) -> (f64, f64) {
    let n = pr.inputs.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        kernel(&pr.inputs[i], &pr.inputs[j], &pr.params) + if i == j { pr.params.sigma_eps2 + extra_diag } else { 0.0 }
    });
    let kinv = k.lu().try_inverse().unwrap();
    let ks = DVector::from_fn(n, |i, _| kernel(&pr.inputs[i], x, &pr.params));
    let y = DVector::from_column_slice(&pr.targets);
    let mean = (ks.transpose() * &kinv * y)[0];
    let var = pr.params.sigma_f2 - (ks.transpose() * &kinv * &ks)[0];
    (mean, var)
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Largest relative deviation of the model's predictions from the dense
/// evaluation at `points` random test inputs.
pub fn prediction_error(pr: &Problem, points: usize, rng: &mut ChaCha8Rng) -> f64 {
    let ts = TrainingSet::unscaled(pr.inputs.clone(), pr.targets.clone()).unwrap();
    let model = GprModel::with_params(ts, pr.params.clone()).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let x: Vec<f64> = (0..pr.params.dim()).map(|_| rng.random_range(-4.0..4.0)).collect();
        let p = model.predict(&x).unwrap();
        let (m, v) = dense_predict(pr, model.jitter(), &x);
        let mean_err = if (p.mean - m).abs() < 1e-12 { 0.0 } else { rel(p.mean, m) };
        worst = worst
            .max(mean_err)
            .max(rel(p.variance, v))
            .max(rel(p.variance_with_noise, v + pr.params.sigma_eps2));
    }
    worst
}

/// Largest absolute gap between the analytic log-likelihood gradient and
/// central differences in log-parameter space.
pub fn gradient_error(pr: &Problem) -> f64 {
    let h = 1e-5;
    let x = DMatrix::from_fn(pr.inputs.len(), pr.params.dim(), |i, j| pr.inputs[i][j]);
    let y = DVector::from_column_slice(&pr.targets);
    let lml = |p: &KernelParams| log_marginal_likelihood(&x, &y, p).unwrap();
    let (_, grad) = lml(&pr.params);
    let theta = pr.params.to_log();
    let mut worst: f64 = 0.0;
    for k in 0..theta.len() {
        let mut up = theta.clone();
        let mut down = theta.clone();
        up[k] += h;
        down[k] -= h;
        let numeric = (lml(&KernelParams::from_log(&up)).0 - lml(&KernelParams::from_log(&down)).0) / (2.0 * h);
        worst = worst.max((numeric - grad[k]).abs());
    }
    worst
}
