//! Diagonal-covariance Gaussian mixture fitted by EM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const VARIANCE_FLOOR: f64 = 1e-8;
const WEIGHT_COLLAPSE: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub struct GmmOptions {
    pub max_iters: usize,
    /// Convergence threshold on the change of the mean per-sample log-likelihood.
    pub tol: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            tol: 1e-10,
            seed: 0,
            restarts: 3,
        }
    }
}

/// Per-feature affine scaling applied before fitting and assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaling {
    fn fit(data: &[Vec<f64>]) -> Self {
        let g = data[0].len();
        let m = data.len() as f64;
        let mut mean = vec![0.0; g];
        let mut scale = vec![0.0; g];
        for d in 0..g {
            let mu = data.iter().map(|r| r[d]).sum::<f64>() / m;
            let var = data.iter().map(|r| (r[d] - mu).powi(2)).sum::<f64>() / m;
            mean[d] = mu;
            scale[d] = if var.sqrt() > 1e-12 * mu.abs().max(1.0) { var.sqrt() } else { 1.0 };
        }
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    /// Component means in scaled feature space (K x g).
    pub means: Vec<Vec<f64>>,
    /// Per-dimension variances in scaled feature space (K x g).
    pub variances: Vec<Vec<f64>>,
    pub scaling: FeatureScaling,
}

impl GmmModel {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.scaling.mean.len()
    }

    fn log_joint_scaled(&self, z: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let mut lp = self.weights[k].ln();
            for ((x, m), v) in z.iter().zip(&self.means[k]).zip(&self.variances[k]) {
                lp -= 0.5 * (LN_2PI + v.ln() + (x - m) * (x - m) / v);
            }
            *o = lp;
        }
    }

    /// `ln(w_k N(x; mean_k, diag var_k))` for each component, in scaled space.
    pub fn log_joint(&self, features: &[f64]) -> Vec<f64> {
        let z = self.scaling.apply(features);
        let mut out = vec![0.0; self.n_components()];
        self.log_joint_scaled(&z, &mut out);
        out
    }

    pub fn posterior(&self, features: &[f64]) -> Vec<f64> {
        let lj = self.log_joint(features);
        let m = lj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = lj.iter().map(|v| (v - m).exp()).sum();
        lj.iter().map(|v| (v - m).exp() / s).collect()
    }

    /// Component with the highest posterior probability; ties go to the lowest index.
    pub fn assign(&self, features: &[f64]) -> usize {
        let lj = self.log_joint(features);
        let mut best = 0;
        for (k, v) in lj.iter().enumerate().skip(1) {
            if *v > lj[best] {
                best = k;
            }
        }
        best
    }

    /// Mean per-sample log-likelihood of `data` (scaled space).
    pub fn mean_log_likelihood(&self, data: &[Vec<f64>]) -> f64 {
        let mut buf = vec![0.0; self.n_components()];
        data.iter()
            .map(|x| {
                self.log_joint_scaled(&self.scaling.apply(x), &mut buf);
                log_sum_exp(&buf)
            })
            .sum::<f64>()
            / data.len() as f64
    }

    pub fn means_original(&self) -> Vec<Vec<f64>> {
        self.means
            .iter()
            .map(|m| {
                m.iter()
                    .zip(self.scaling.mean.iter().zip(&self.scaling.scale))
                    .map(|(v, (mu, s))| v * s + mu)
                    .collect()
            })
            .collect()
    }

    pub fn variances_original(&self) -> Vec<Vec<f64>> {
        self.variances
            .iter()
            .map(|vs| vs.iter().zip(&self.scaling.scale).map(|(v, s)| v * s * s).collect())
            .collect()
    }
}

/// Free-function form of [`GmmModel::assign`].
pub fn gmm_assign(gmm: &GmmModel, features: &[f64]) -> usize {
    gmm.assign(features)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of a single EM run, with the log-likelihood trace.
#[derive(Debug, Clone)]
pub struct EmTrace {
    pub model: GmmModel,
    /// Mean per-sample log-likelihood before each M-step.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

/// Fits a K-component diagonal GMM; returns the best of `restarts` EM runs.
pub fn gmm_fit(data: &[Vec<f64>], k: usize, opts: &GmmOptions) -> Result<GmmModel> {
    gmm_fit_traced(data, k, opts).map(|t| t.model)
}

pub fn gmm_fit_traced(data: &[Vec<f64>], k: usize, opts: &GmmOptions) -> Result<EmTrace> {
    if k == 0 {
        return Err(Error::Usage("GMM needs at least one component".into()));
    }
    if data.len() <= k {
        return Err(Error::Usage(format!("GMM with K = {k} needs more than {k} samples, got {}", data.len())));
    }
    let g = data[0].len();
    if g == 0 || data.iter().any(|r| r.len() != g || !r.iter().all(|v| v.is_finite())) {
        return Err(Error::Usage("GMM data must be non-empty, rectangular and finite".into()));
    }
    let scaling = FeatureScaling::fit(data);
    let z: Vec<Vec<f64>> = data.iter().map(|r| scaling.apply(r)).collect();

    // Points ordered by distance from the centroid (then lexicographically),
    // so seeding by quantile does not depend on row order or duplication.
    let centroid: Vec<f64> = (0..g).map(|d| z.iter().map(|r| r[d]).sum::<f64>() / z.len() as f64).collect();
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| {
        sq_dist(&z[a], &centroid)
            .total_cmp(&sq_dist(&z[b], &centroid))
            .then_with(|| {
                z[a].iter()
                    .zip(&z[b])
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<EmTrace> = None;
    let mut collapsed = 0;
    for restart in 0..opts.restarts.max(1) {
        let first = if restart == 0 {
            *order.last().unwrap()
        } else {
            let u: f64 = rng.random();
            order[((u * order.len() as f64) as usize).min(order.len() - 1)]
        };
        let centers = farthest_point_seeds(&z, &order, first, k);
        match run_em(&z, &centers, opts) {
            Some((weights, means, variances, trace, converged)) => {
                let ll = *trace.last().unwrap();
                if best.as_ref().is_none_or(|b| ll > *b.log_likelihood.last().unwrap()) {
                    best = Some(EmTrace {
                        model: GmmModel {
                            weights,
                            means,
                            variances,
                            scaling: scaling.clone(),
                        },
                        log_likelihood: trace,
                        converged,
                    });
                }
            }
            None => collapsed += 1,
        }
    }
    best.ok_or_else(|| Error::Fit(format!("all {collapsed} GMM restarts collapsed (K = {k})")))
}

fn farthest_point_seeds(z: &[Vec<f64>], order: &[usize], first: usize, k: usize) -> Vec<Vec<f64>> {
    let mut centers = vec![z[first].clone()];
    let mut min_d: Vec<f64> = z.iter().map(|p| sq_dist(p, &z[first])).collect();
    while centers.len() < k {
        let mut pick = order[0];
        for &i in order {
            if min_d[i] > min_d[pick] {
                pick = i;
            }
        }
        centers.push(z[pick].clone());
        for (i, p) in z.iter().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(p, &z[pick]));
        }
    }
    centers
}

type EmOutcome = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>, bool);

fn run_em(z: &[Vec<f64>], centers: &[Vec<f64>], opts: &GmmOptions) -> Option<EmOutcome> {
    let k = centers.len();
    let g = z[0].len();
    let m = z.len();
    let mut weights = vec![1.0 / k as f64; k];
    let mut means = centers.to_vec();
    // start every component at the (unit) global spread
    let mut variances = vec![vec![1.0f64; g]; k];
    let mut resp = vec![vec![0.0f64; k]; m];
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;

    for _ in 0..opts.max_iters.max(1) {
        // E-step
        let mut total = 0.0;
        for (x, r) in z.iter().zip(resp.iter_mut()) {
            for c in 0..k {
                let mut lp = weights[c].ln();
                for d in 0..g {
                    let v = variances[c][d];
                    lp -= 0.5 * (LN_2PI + v.ln() + (x[d] - means[c][d]).powi(2) / v);
                }
                r[c] = lp;
            }
            let lse = log_sum_exp(r);
            total += lse;
            r.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let ll = total / m as f64;
        if let Some(prev) = trace.last() {
            if (ll - prev).abs() < opts.tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);

        // M-step
        for c in 0..k {
            let nk: f64 = resp.iter().map(|r| r[c]).sum();
            weights[c] = nk / m as f64;
            if nk <= 0.0 {
                return None;
            }
            for d in 0..g {
                let mu = resp.iter().zip(z).map(|(r, x)| r[c] * x[d]).sum::<f64>() / nk;
                let var = resp.iter().zip(z).map(|(r, x)| r[c] * (x[d] - mu).powi(2)).sum::<f64>() / nk;
                means[c][d] = mu;
                variances[c][d] = var.max(VARIANCE_FLOOR);
            }
        }
        let collapsed = weights.iter().any(|&w| w < WEIGHT_COLLAPSE)
            || variances.iter().any(|vs| vs.iter().all(|&v| v <= VARIANCE_FLOOR));
        if collapsed {
            return None;
        }
    }
    Some((weights, means, variances, trace, converged))
}
