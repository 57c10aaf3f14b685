//! Exact Gaussian process regression with a Matérn-3/2 ARD kernel.
//!
//! Inputs and targets are standardized internally. Hyperparameters
//! ([`KernelParams`]) live in that standardized space; every [`Prediction`]
//! is reported in the original target units.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{self, LbfgsOptions};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Per-feature affine normalization plus target normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub target_mean: f64,
    pub target_scale: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scale used in place of a (near-)zero standard deviation.
fn usable_scale(std: f64, mean: f64) -> f64 {
    if std > 1e-12 * mean.abs().max(1.0) {
        std
    } else {
        1.0
    }
}

impl Standardization {
    pub fn identity(r: usize) -> Self {
        Self {
            mean: vec![0.0; r],
            scale: vec![1.0; r],
            target_mean: 0.0,
            target_scale: 1.0,
        }
    }

    pub fn fit(inputs: &[Vec<f64>], targets: &[f64]) -> Self {
        let r = inputs.first().map_or(0, Vec::len);
        let mut mean = Vec::with_capacity(r);
        let mut scale = Vec::with_capacity(r);
        for d in 0..r {
            let (m, s) = mean_std(inputs.iter().map(move |row| row[d]));
            mean.push(m);
            scale.push(usable_scale(s, m));
        }
        let (tm, ts) = mean_std(targets.iter().copied());
        Self {
            mean,
            scale,
            target_mean: tm,
            target_scale: usable_scale(ts, tm),
        }
    }

    pub fn standardize_input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn destandardize_input(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn standardize_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_scale
    }

    pub fn destandardize_target(&self, z: f64) -> f64 {
        z * self.target_scale + self.target_mean
    }
}

/// Training data `Z = [y u_1 .. u_r]` with the normalization derived from it.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    standardization: Standardization,
    std_inputs: DMatrix<f64>,
    std_targets: DVector<f64>,
}

impl TrainingSet {
    /// Builds a training set, standardizing features and targets.
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        Self::validate(&inputs, &targets)?;
        let st = Standardization::fit(&inputs, &targets);
        Ok(Self::assemble(inputs, targets, st))
    }

    /// Builds a training set that is used as-is (identity normalization).
    pub fn unscaled(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        Self::validate(&inputs, &targets)?;
        let r = inputs[0].len();
        Ok(Self::assemble(inputs, targets, Standardization::identity(r)))
    }

    pub fn with_standardization(
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
        standardization: Standardization,
    ) -> Result<Self> {
        Self::validate(&inputs, &targets)?;
        if standardization.mean.len() != inputs[0].len() || standardization.scale.len() != inputs[0].len() {
            return Err(Error::Usage("standardization dimension does not match inputs".into()));
        }
        Ok(Self::assemble(inputs, targets, standardization))
    }

    fn validate(inputs: &[Vec<f64>], targets: &[f64]) -> Result<()> {
        if inputs.len() != targets.len() {
            return Err(Error::Usage(format!(
                "{} input rows but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if inputs.len() < 2 {
            return Err(Error::Usage(format!("need at least 2 training samples, got {}", inputs.len())));
        }
        let r = inputs[0].len();
        if r == 0 {
            return Err(Error::Usage("training inputs have no features".into()));
        }
        for (i, row) in inputs.iter().enumerate() {
            if row.len() != r {
                return Err(Error::Usage(format!("row {i} has {} features, expected {r}", row.len())));
            }
            if !row.iter().all(|v| v.is_finite()) || !targets[i].is_finite() {
                return Err(Error::Usage(format!("row {i} contains non-finite values")));
            }
        }
        Ok(())
    }

    fn assemble(inputs: Vec<Vec<f64>>, targets: Vec<f64>, st: Standardization) -> Self {
        let n = inputs.len();
        let r = inputs[0].len();
        let std_inputs = DMatrix::from_fn(n, r, |i, d| (inputs[i][d] - st.mean[d]) / st.scale[d]);
        let std_targets = DVector::from_iterator(n, targets.iter().map(|&y| st.standardize_target(y)));
        Self {
            inputs,
            targets,
            standardization: st,
            std_inputs,
            std_targets,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.std_inputs.ncols()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn standardized_inputs(&self) -> &DMatrix<f64> {
        &self.std_inputs
    }

    pub fn standardized_targets(&self) -> &DVector<f64> {
        &self.std_targets
    }
}

/// Matérn-3/2 hyperparameters with one length scale per input feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma_f2: f64,
    pub length_scales: Vec<f64>,
    pub sigma_eps2: f64,
}

impl KernelParams {
    pub fn new(sigma_f2: f64, length_scales: Vec<f64>, sigma_eps2: f64) -> Result<Self> {
        let p = Self {
            sigma_f2,
            length_scales,
            sigma_eps2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.sigma_f2) || !ok(self.sigma_eps2) || !self.length_scales.iter().all(|&l| ok(l)) {
            return Err(Error::Usage(format!("kernel parameters must be positive and finite: {self:?}")));
        }
        if self.length_scales.is_empty() {
            return Err(Error::Usage("kernel needs at least one length scale".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    /// `[ln sigma_f2, ln l_1, .., ln l_r, ln sigma_eps2]`
    pub fn to_log(&self) -> Vec<f64> {
        std::iter::once(self.sigma_f2.ln())
            .chain(self.length_scales.iter().map(|l| l.ln()))
            .chain(std::iter::once(self.sigma_eps2.ln()))
            .collect()
    }

    pub fn from_log(theta: &[f64]) -> Self {
        let r = theta.len() - 2;
        Self {
            sigma_f2: theta[0].exp(),
            length_scales: theta[1..=r].iter().map(|t| t.exp()).collect(),
            sigma_eps2: theta[r + 1].exp(),
        }
    }

    #[inline]
    fn scaled_distance(&self, u: &[f64], v: &[f64]) -> f64 {
        u.iter()
            .zip(v)
            .zip(&self.length_scales)
            .map(|((a, b), l)| ((a - b) / l).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[inline]
    fn kernel_unchecked(&self, u: &[f64], v: &[f64]) -> f64 {
        let s = SQRT3 * self.scaled_distance(u, v);
        self.sigma_f2 * (1.0 + s) * (-s).exp()
    }
}

/// Matérn-3/2 ARD covariance `sigma_f2 (1 + sqrt3 tau) exp(-sqrt3 tau)`.
pub fn matern32(u: &[f64], v: &[f64], params: &KernelParams) -> Result<f64> {
    if u.len() != params.dim() || v.len() != params.dim() {
        return Err(Error::Usage(format!(
            "kernel expects {} features, got {} and {}",
            params.dim(),
            u.len(),
            v.len()
        )));
    }
    Ok(params.kernel_unchecked(u, v))
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Kernel Gram matrix `K(X, X)` without noise or jitter.
pub fn gram_matrix(inputs: &DMatrix<f64>, params: &KernelParams) -> DMatrix<f64> {
    let n = inputs.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(inputs, i)).collect();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.sigma_f2;
        for j in 0..i {
            let v = params.kernel_unchecked(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Factorization of `K + sigma_eps2 I + jitter I` with jitter escalation.
struct Factor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

fn factorize(gram: &DMatrix<f64>, sigma_eps2: f64) -> Option<Factor> {
    let n = gram.nrows();
    let base = gram.diagonal().mean().max(f64::MIN_POSITIVE);
    let mut rel = 1e-10;
    while rel <= 1e-4 * 1.000_001 {
        let jitter = rel * base;
        let mut m = gram.clone();
        for i in 0..n {
            m[(i, i)] += sigma_eps2 + jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Some(Factor { chol, jitter });
        }
        rel *= 10.0;
    }
    None
}

/// Log marginal likelihood of `targets` under the GP prior, and its gradient
/// with respect to `[ln sigma_f2, ln l_1 .. ln l_r, ln sigma_eps2]`.
///
/// Operates on the data exactly as given (no standardization).
pub fn log_marginal_likelihood(
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    params: &KernelParams,
) -> Result<(f64, Vec<f64>)> {
    if inputs.ncols() != params.dim() || inputs.nrows() != targets.len() {
        return Err(Error::Usage("training data shape does not match kernel".into()));
    }
    lml_with_gradient(inputs, targets, params)
        .ok_or_else(|| Error::Fit(format!("covariance factorization failed at {params:?}")))
}

fn lml_with_gradient(inputs: &DMatrix<f64>, targets: &DVector<f64>, params: &KernelParams) -> Option<(f64, Vec<f64>)> {
    let n = inputs.nrows();
    let r = inputs.ncols();
    let gram = gram_matrix(inputs, params);
    let factor = factorize(&gram, params.sigma_eps2)?;
    let alpha = factor.chol.solve(targets);
    let l = factor.chol.l_dirty();
    let log_det_half: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    let value = -0.5 * targets.dot(&alpha) - log_det_half - 0.5 * n as f64 * LN_2PI;

    let kinv = factor.chol.inverse();
    // W = alpha alpha^T - K^{-1}; dL/dtheta = 0.5 tr(W dK/dtheta)
    let mut grad = vec![0.0; r + 2];
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(inputs, i)).collect();
    let mut trace_w = 0.0;
    for i in 0..n {
        let wii = alpha[i] * alpha[i] - kinv[(i, i)];
        trace_w += wii;
        grad[0] += 0.5 * wii * params.sigma_f2;
        for j in 0..i {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            let tau = params.scaled_distance(&rows[i], &rows[j]);
            let e = (-SQRT3 * tau).exp();
            // off-diagonal terms appear twice in the trace
            grad[0] += w * params.sigma_f2 * (1.0 + SQRT3 * tau) * e;
            let common = w * 3.0 * params.sigma_f2 * e;
            for d in 0..r {
                let diff = (rows[i][d] - rows[j][d]) / params.length_scales[d];
                grad[d + 1] += common * diff * diff;
            }
        }
    }
    grad[r + 1] = 0.5 * params.sigma_eps2 * trace_w;
    Some((value, grad))
}

/// Posterior predictive moments, in target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    /// Latent variance of f*.
    pub variance: f64,
    /// Latent variance plus observation noise.
    pub variance_with_noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitParams {
    Auto,
    Given(KernelParams),
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iters: 200,
            seed: 0,
            grad_tol: 1e-5,
        }
    }
}

/// Diagnostics from a hyperparameter fit.
#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub restart_lml: Vec<Option<f64>>,
    /// Optimizer iterations per restart (0 when the restart failed).
    pub restart_iters: Vec<usize>,
    pub best_restart: usize,
}

/// A fitted exact GP: training data, hyperparameters and cached factorization.
#[derive(Debug, Clone)]
pub struct GprModel {
    training: TrainingSet,
    params: KernelParams,
    chol_l: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    rows: Vec<Vec<f64>>,
}

impl GprModel {
    /// Conditions the GP on `training` with fixed hyperparameters.
    pub fn with_params(training: TrainingSet, params: KernelParams) -> Result<Self> {
        params.validate()?;
        if params.dim() != training.n_features() {
            return Err(Error::Usage(format!(
                "kernel has {} length scales but data has {} features",
                params.dim(),
                training.n_features()
            )));
        }
        let gram = gram_matrix(training.standardized_inputs(), &params);
        let factor = factorize(&gram, params.sigma_eps2)
            .ok_or_else(|| Error::Fit(format!("covariance factorization failed at max jitter for {params:?}")))?;
        let alpha = factor.chol.solve(training.standardized_targets());
        let x = training.standardized_inputs();
        let rows = (0..x.nrows()).map(|i| row(x, i)).collect();
        Ok(Self {
            chol_l: factor.chol.l(),
            alpha,
            jitter: factor.jitter,
            params,
            training,
            rows,
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn training(&self) -> &TrainingSet {
        &self.training
    }

    pub fn n_features(&self) -> usize {
        self.params.dim()
    }

    /// Lower Cholesky factor of `K + (sigma_eps2 + jitter) I`.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol_l
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Log marginal likelihood of the standardized training targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.alpha.len();
        let log_det_half: f64 = (0..n).map(|i| self.chol_l[(i, i)].ln()).sum();
        -0.5 * self.training.standardized_targets().dot(&self.alpha) - log_det_half - 0.5 * n as f64 * LN_2PI
    }

    pub fn predict(&self, x_star: &[f64]) -> Result<Prediction> {
        if x_star.len() != self.n_features() {
            return Err(Error::Usage(format!(
                "model expects {} features, got {}",
                self.n_features(),
                x_star.len()
            )));
        }
        let st = self.training.standardization();
        let z = st.standardize_input(x_star);
        let k_star = DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| self.params.kernel_unchecked(r, &z)),
        );
        let mean_std = k_star.dot(&self.alpha);
        let v = self
            .chol_l
            .solve_lower_triangular(&k_star)
            .ok_or_else(|| Error::Fit("singular Cholesky factor".into()))?;
        let latent = (self.params.sigma_f2 - v.norm_squared()).clamp(0.0, self.params.sigma_f2);
        let s2 = st.target_scale * st.target_scale;
        Ok(Prediction {
            mean: st.destandardize_target(mean_std),
            variance: latent * s2,
            variance_with_noise: (latent + self.params.sigma_eps2) * s2,
        })
    }

    /// Output-scale variance in target units.
    pub fn output_variance(&self) -> f64 {
        let s = self.training.standardization().target_scale;
        self.params.sigma_f2 * s * s
    }

    pub fn to_document(&self) -> GprModelDocument {
        GprModelDocument {
            schema_version: MODEL_SCHEMA_VERSION,
            standardization: self.training.standardization().clone(),
            params: self.params.clone(),
            inputs: self.training.inputs().to_vec(),
            targets: self.training.targets().to_vec(),
        }
    }

    pub fn from_document(doc: GprModelDocument) -> Result<Self> {
        if doc.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported GPR model schema version {}",
                doc.schema_version
            )));
        }
        let training = TrainingSet::with_standardization(doc.inputs, doc.targets, doc.standardization)?;
        Self::with_params(training, doc.params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_document())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_document(serde_json::from_str(&text)?)
    }
}

/// Persisted form of an exact GP: the model is its data plus hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GprModelDocument {
    pub schema_version: u32,
    pub standardization: Standardization,
    pub params: KernelParams,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

/// Default initialization in standardized space.
pub fn auto_init(training: &TrainingSet) -> KernelParams {
    let y = training.standardized_targets();
    let n = y.len() as f64;
    let my = y.mean();
    let var_y = (y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n).max(1e-2);
    let x = training.standardized_inputs();
    let length_scales = (0..x.ncols())
        .map(|d| {
            let (_, s) = mean_std(x.column(d).iter().copied());
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    KernelParams {
        sigma_f2: var_y,
        length_scales,
        sigma_eps2: 0.01 * var_y,
    }
}

fn log_bounds(r: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![1e-4f64.ln()];
    let mut hi = vec![1e4f64.ln()];
    lo.extend(std::iter::repeat_n(1e-3f64.ln(), r));
    hi.extend(std::iter::repeat_n(1e4f64.ln(), r));
    lo.push(1e-8f64.ln());
    hi.push(1e1f64.ln());
    (lo, hi)
}

/// Maximizes the log marginal likelihood over hyperparameters (log space,
/// L-BFGS with backtracking) from `init` plus seeded perturbed restarts.
pub fn fit(training: TrainingSet, init: &InitParams, opts: &FitOptions) -> Result<GprModel> {
    fit_with_report(training, init, opts).map(|(m, _)| m)
}

pub fn fit_with_report(training: TrainingSet, init: &InitParams, opts: &FitOptions) -> Result<(GprModel, FitReport)> {
    let start = match init {
        InitParams::Auto => auto_init(&training),
        InitParams::Given(p) => {
            p.validate()?;
            if p.dim() != training.n_features() {
                return Err(Error::Usage("initial kernel dimension does not match data".into()));
            }
            p.clone()
        }
    };
    let r = training.n_features();
    let (lower, upper) = log_bounds(r);
    let lopts = LbfgsOptions {
        max_iters: opts.max_iters,
        memory: 7,
        grad_tol: opts.grad_tol,
        f_tol: 1e-10,
        lower,
        upper,
    };
    let x = training.standardized_inputs();
    let y = training.standardized_targets();
    let objective = |theta: &[f64]| {
        let p = KernelParams::from_log(theta);
        lml_with_gradient(x, y, &p).map(|(v, g)| (-v, g.into_iter().map(|gi| -gi).collect::<Vec<_>>()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let theta0 = start.to_log();
    let mut report = FitReport::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..opts.restarts.max(1) {
        let init_theta: Vec<f64> = if restart == 0 {
            theta0.clone()
        } else {
            // log-uniform perturbation by a factor in [0.1, 10]
            theta0
                .iter()
                .map(|t| t + rng.random_range(-1.0..1.0) * std::f64::consts::LN_10)
                .collect()
        };
        let outcome = optim::minimize(objective, &init_theta, &lopts);
        report.restart_lml.push(outcome.as_ref().map(|m| -m.f));
        report.restart_iters.push(outcome.as_ref().map_or(0, |m| m.iters));
        if let Some(m) = outcome {
            if best.as_ref().is_none_or(|(bf, _)| m.f < *bf) {
                report.best_restart = restart;
                best = Some((m.f, m.x));
            }
        }
    }
    let (_, theta) = best.ok_or_else(|| {
        Error::Fit(format!(
            "all {} restarts failed to factorize the covariance (N = {}, r = {})",
            opts.restarts.max(1),
            training.len(),
            r
        ))
    })?;
    let model = GprModel::with_params(training, KernelParams::from_log(&theta))?;
    Ok((model, report))
}
