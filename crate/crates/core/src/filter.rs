//! Bootstrap particle filter on a constant-velocity model, with optional
//! soft-constraint reweighting, and the Kalman filter used as its oracle.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2x4, Matrix4, Vector2, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::state::VehicleState;

/// Discrete constant-velocity process with white-acceleration intensity `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessModel {
    pub dt: f64,
    pub q: f64,
    /// Per-axis lower-triangular factor of the 2x2 (position, velocity) block.
    chol: [f64; 3],
}

impl ProcessModel {
    pub fn new(dt: f64, q: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        if !(q > 0.0 && q.is_finite()) {
            return Err(Error::Config(format!("process noise intensity must be positive, got {q}")));
        }
        let l11 = (q * dt.powi(3) / 3.0).sqrt();
        let l21 = (q * dt * dt / 2.0) / l11;
        let l22 = (q * dt - l21 * l21).max(0.0).sqrt();
        Ok(Self { dt, q, chol: [l11, l21, l22] })
    }

    /// State order is `[x, y, vx, vy]`.
    pub fn transition(&self) -> Matrix4<f64> {
        let t = self.dt;
        Matrix4::new(
            1.0, 0.0, t, 0.0, //
            0.0, 1.0, 0.0, t, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    pub fn noise_covariance(&self) -> Matrix4<f64> {
        let (t, q) = (self.dt, self.q);
        let a = q * t.powi(3) / 3.0;
        let b = q * t * t / 2.0;
        let c = q * t;
        Matrix4::new(
            a, 0.0, b, 0.0, //
            0.0, a, 0.0, b, //
            b, 0.0, c, 0.0, //
            0.0, b, 0.0, c,
        )
    }

    #[inline]
    pub fn propagate<R: Rng + ?Sized>(&self, s: &VehicleState, rng: &mut R) -> VehicleState {
        let [l11, l21, l22] = self.chol;
        let (z1, z2, z3, z4): (f64, f64, f64, f64) = (
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let t = self.dt;
        VehicleState {
            x: s.x + t * s.vx + l11 * z1,
            y: s.y + t * s.vy + l11 * z2,
            vx: s.vx + l21 * z1 + l22 * z3,
            vy: s.vy + l21 * z2 + l22 * z4,
        }
    }
}

/// Position-only measurement with isotropic Gaussian noise `sigma_v^2 I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationModel {
    pub sigma_v: f64,
}

impl ObservationModel {
    pub fn new(sigma_v: f64) -> Result<Self> {
        if !(sigma_v > 0.0 && sigma_v.is_finite()) {
            return Err(Error::Config(format!("measurement noise must be positive, got {sigma_v}")));
        }
        Ok(Self { sigma_v })
    }

    pub fn matrix() -> Matrix2x4<f64> {
        Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
    }

    /// Log density up to the additive constant shared by all particles.
    #[inline]
    pub fn log_likelihood(&self, s: &VehicleState, z: [f64; 2]) -> f64 {
        let dx = z[0] - s.x;
        let dy = z[1] - s.y;
        -(dx * dx + dy * dy) / (2.0 * self.sigma_v * self.sigma_v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub states: Vec<VehicleState>,
    /// Normalized weights.
    pub weights: Vec<f64>,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.weights)
    }
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub particles: usize,
    pub dt: f64,
    pub q: f64,
    /// Initial covariance diagonal `[x, y, vx, vy]`.
    pub p0_diag: [f64; 4],
    /// Resample when ESS falls below this fraction of the particle count.
    pub resample_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            particles: 500,
            dt: 1.0 / 13.0,
            q: 4.0,
            p0_diag: [10.0, 10.0, 2.5, 2.5],
            resample_threshold: 0.5,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::Config("particle count must be at least 2".into()));
        }
        if self.p0_diag.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("initial covariance diagonal must be positive".into()));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(Error::Config("resample threshold must lie in (0, 1]".into()));
        }
        ProcessModel::new(self.dt, self.q)?;
        Ok(())
    }
}

/// True vehicle states sampled every `dt` seconds, with the true heading.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthTrack {
    pub dt: f64,
    pub states: Vec<VehicleState>,
    /// Direction of travel, radians from +x.
    pub headings: Vec<f64>,
}

impl GroundTruthTrack {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Track with headings taken from the velocity direction.
    pub fn from_states(dt: f64, states: Vec<VehicleState>) -> Self {
        let headings = states.iter().map(|s| s.vy.atan2(s.vx)).collect();
        Self { dt, states, headings }
    }

    pub fn timestamp(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }
}

/// Noisy position measurements of the track, one per step; each is dropped
/// (`None`) with probability `dropout`.
pub fn gps_measurements<R: Rng + ?Sized>(
    track: &GroundTruthTrack,
    sigma_v: f64,
    dropout: f64,
    rng: &mut R,
) -> Vec<Option<[f64; 2]>> {
    track
        .states
        .iter()
        .map(|s| {
            let nx: f64 = StandardNormal.sample(rng);
            let ny: f64 = StandardNormal.sample(rng);
            let keep = dropout <= 0.0 || rng.random::<f64>() >= dropout;
            keep.then_some([s.x + sigma_v * nx, s.y + sigma_v * ny])
        })
        .collect()
}

pub fn init_particles<R: Rng + ?Sized>(n: usize, mean: &VehicleState, p0_diag: [f64; 4], rng: &mut R) -> ParticleSet {
    let sd = p0_diag.map(f64::sqrt);
    let m = mean.to_array();
    let states = (0..n)
        .map(|_| {
            let mut a = [0.0; 4];
            for k in 0..4 {
                let z: f64 = StandardNormal.sample(rng);
                a[k] = m[k] + sd[k] * z;
            }
            VehicleState::from_array(a)
        })
        .collect();
    ParticleSet {
        states,
        weights: vec![1.0 / n as f64; n],
    }
}

pub fn predict_step<R: Rng + ?Sized>(particles: &mut ParticleSet, process: &ProcessModel, rng: &mut R) {
    for s in &mut particles.states {
        *s = process.propagate(s, rng);
    }
}

/// Outcome of one weight update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    /// All weights underflowed; the set was reset to uniform weights.
    pub reset: bool,
}

/// Threshold below which the unnormalized weight total counts as underflow.
const UNDERFLOW_LN: f64 = -690.775_527_898_213_7; // ln(1e-300)

/// Multiplies weights by the measurement likelihood (if any) and the
/// constraint factors, then normalizes. Works in the log domain; when the
/// normalizing total would be below 1e-300 the weights are reset to uniform.
pub fn update_step(
    particles: &mut ParticleSet,
    measurement: Option<[f64; 2]>,
    observation: &ObservationModel,
    constraints: &ConstraintSet,
) -> UpdateOutcome {
    let n = particles.len();
    if measurement.is_none() && constraints.is_empty() {
        return UpdateOutcome { reset: false };
    }
    let mut log_w: Vec<f64> = particles
        .states
        .iter()
        .zip(&particles.weights)
        .map(|(s, w)| {
            let mut l = w.ln();
            if let Some(z) = measurement {
                l += observation.log_likelihood(s, z);
            }
            l + constraints.log_likelihood(s)
        })
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = log_w.iter().map(|l| (l - max).exp()).sum();
    // The measurement density constant is common to all particles; include it so
    // the underflow test refers to the actual unnormalized total.
    let constant = measurement.map_or(0.0, |_| -(2.0 * std::f64::consts::PI * observation.sigma_v.powi(2)).ln());
    if !max.is_finite() || max + sum.ln() + constant < UNDERFLOW_LN {
        particles.weights.iter_mut().for_each(|w| *w = 1.0 / n as f64);
        return UpdateOutcome { reset: true };
    }
    for (w, l) in particles.weights.iter_mut().zip(log_w.iter_mut()) {
        *w = (*l - max).exp() / sum;
    }
    UpdateOutcome { reset: false }
}

/// Systematic resampling: returns the selected ancestor indices.
pub fn systematic_indices(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for j in 0..n {
        let u = (u0 + j as f64) / n as f64;
        while u > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

pub fn systematic_resample<R: Rng + ?Sized>(particles: &mut ParticleSet, rng: &mut R) {
    let n = particles.len();
    let idx = systematic_indices(&particles.weights, rng.random::<f64>());
    particles.states = idx.iter().map(|&i| particles.states[i]).collect();
    particles.weights = vec![1.0 / n as f64; n];
}

/// Resamples when ESS < `threshold * N`; returns whether it did.
pub fn resample_if_needed<R: Rng + ?Sized>(particles: &mut ParticleSet, threshold: f64, rng: &mut R) -> bool {
    if particles.ess() < threshold * particles.len() as f64 {
        systematic_resample(particles, rng);
        true
    } else {
        false
    }
}

/// Weighted posterior mean.
pub fn estimate(particles: &ParticleSet) -> VehicleState {
    let mut acc = [0.0; 4];
    for (s, w) in particles.states.iter().zip(&particles.weights) {
        let a = s.to_array();
        for k in 0..4 {
            acc[k] += w * a[k];
        }
    }
    VehicleState::from_array(acc)
}

/// Per-step constraints, built from the previous estimate.
pub trait ConstraintSource {
    fn constraints(&mut self, step: usize, last_estimate: &VehicleState) -> Result<ConstraintSet>;
}

/// No constraints at any step (the plain bootstrap filter).
#[derive(Debug, Clone, Copy, Default)]
pub struct Unconstrained;

impl ConstraintSource for Unconstrained {
    fn constraints(&mut self, _step: usize, _last: &VehicleState) -> Result<ConstraintSet> {
        Ok(ConstraintSet::empty())
    }
}

impl<F> ConstraintSource for F
where
    F: FnMut(usize, &VehicleState) -> Result<ConstraintSet>,
{
    fn constraints(&mut self, step: usize, last_estimate: &VehicleState) -> Result<ConstraintSet> {
        self(step, last_estimate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub error_m: f64,
    pub ess: f64,
    pub n_constraints: usize,
    pub reset: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterRun {
    pub estimates: Vec<VehicleState>,
    /// Euclidean position error per step.
    pub errors: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub resets: usize,
    pub resamples: usize,
}

impl FilterRun {
    pub fn mean_error(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len().max(1) as f64
    }

    pub fn write_diagnostics(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "step,error_m,ess,n_constraints,reset_flag").map_err(io)?;
        for (k, d) in self.diagnostics.iter().enumerate() {
            writeln!(w, "{k},{:.6},{:.3},{},{}", d.error_m, d.ess, d.n_constraints, u8::from(d.reset)).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Runs the filter over `track`, initialized around `x0`. Step 0 updates the
/// initial particles directly; later steps predict first. `measurements[k]`
/// is the position fix at step `k`, if any.
pub fn run_filter<R: Rng + ?Sized, C: ConstraintSource + ?Sized>(
    track: &GroundTruthTrack,
    measurements: &[Option<[f64; 2]>],
    x0: &VehicleState,
    config: &FilterConfig,
    observation: &ObservationModel,
    source: &mut C,
    rng: &mut R,
) -> Result<FilterRun> {
    config.validate()?;
    if measurements.len() != track.states.len() {
        return Err(Error::Usage(format!(
            "track has {} steps but {} measurement slots",
            track.states.len(),
            measurements.len()
        )));
    }
    let process = ProcessModel::new(config.dt, config.q)?;
    let mut particles = init_particles(config.particles, x0, config.p0_diag, rng);
    let mut last = *x0;
    let mut run = FilterRun {
        estimates: Vec::with_capacity(track.len()),
        errors: Vec::with_capacity(track.len()),
        diagnostics: Vec::with_capacity(track.len()),
        ..Default::default()
    };
    for (k, (truth, z)) in track.states.iter().zip(measurements).enumerate() {
        if k > 0 {
            predict_step(&mut particles, &process, rng);
        }
        let set = source.constraints(k, &last)?;
        let outcome = update_step(&mut particles, *z, observation, &set);
        if outcome.reset {
            run.resets += 1;
            log::debug!("step {k}: all particle weights underflowed, reset to uniform");
        }
        let ess = particles.ess();
        last = estimate(&particles);
        let error = planar(last.position(), truth.position());
        run.estimates.push(last);
        run.errors.push(error);
        run.diagnostics.push(StepDiagnostics {
            error_m: error,
            ess,
            n_constraints: set.len(),
            reset: outcome.reset,
        });
        if resample_if_needed(&mut particles, config.resample_threshold, rng) {
            run.resamples += 1;
        }
    }
    Ok(run)
}

fn planar(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Linear Kalman filter for the same model; exact reference for the
/// unconstrained particle filter.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanFilter {
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
    f: Matrix4<f64>,
    q: Matrix4<f64>,
    r: f64,
}

impl KalmanFilter {
    pub fn new(x0: &VehicleState, p0_diag: [f64; 4], process: &ProcessModel, observation: &ObservationModel) -> Self {
        Self {
            mean: Vector4::from(x0.to_array()),
            cov: Matrix4::from_diagonal(&Vector4::from(p0_diag)),
            f: process.transition(),
            q: process.noise_covariance(),
            r: observation.sigma_v * observation.sigma_v,
        }
    }

    pub fn predict(&mut self) {
        self.mean = self.f * self.mean;
        self.cov = self.f * self.cov * self.f.transpose() + self.q;
    }

    pub fn update(&mut self, z: [f64; 2]) {
        let h = ObservationModel::matrix();
        let s = h * self.cov * h.transpose() + nalgebra::Matrix2::identity() * self.r;
        let s_inv = s.try_inverse().expect("innovation covariance is positive definite");
        let k = self.cov * h.transpose() * s_inv;
        let innov = Vector2::new(z[0], z[1]) - h * self.mean;
        self.mean += k * innov;
        let i_kh = Matrix4::identity() - k * h;
        // Joseph form keeps the covariance symmetric PSD.
        self.cov = i_kh * self.cov * i_kh.transpose() + k * k.transpose() * self.r;
    }

    pub fn state(&self) -> VehicleState {
        VehicleState::new(self.mean[0], self.mean[1], self.mean[2], self.mean[3])
    }
}

/// Kalman means and covariances, same step convention as [`run_filter`].
pub fn kalman_oracle(
    measurements: &[Option<[f64; 2]>],
    x0: &VehicleState,
    config: &FilterConfig,
    observation: &ObservationModel,
) -> Result<Vec<(VehicleState, Matrix4<f64>)>> {
    let process = ProcessModel::new(config.dt, config.q)?;
    let mut kf = KalmanFilter::new(x0, config.p0_diag, &process, observation);
    let mut out = Vec::with_capacity(measurements.len());
    for (k, z) in measurements.iter().enumerate() {
        if k > 0 {
            kf.predict();
        }
        if let Some(z) = z {
            kf.update(*z);
        }
        out.push((kf.state(), kf.cov));
    }
    Ok(out)
}
