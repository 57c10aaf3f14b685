//! Synthetic closed-loop course: a smooth ring road, light poles alongside
//! it, the piecewise-cubic road map fitted to it and a ground-truth drive.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::GroundTruthTrack;
use crate::map::{Axis, HdMap, Landmark, LandmarkMap, RoadMap, RoadSegment};
use crate::state::VehicleState;

/// Largest tolerated deviation between a fitted segment and the course.
pub const MAX_FIT_RESIDUAL: f64 = 0.1;

const DENSE_SAMPLES: usize = 40_000;
const FIT_STEP: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeedProfile {
    /// m/s
    pub mean: f64,
    /// m/s, amplitude of the sinusoidal variation
    pub amplitude: f64,
    /// s
    pub period: f64,
}

impl Default for SpeedProfile {
    fn default() -> Self {
        Self {
            mean: 8.0,
            amplitude: 1.0,
            period: 60.0,
        }
    }
}

impl SpeedProfile {
    /// Slower drive that covers roughly one loop in the default duration.
    pub fn slow() -> Self {
        Self {
            mean: 4.0,
            amplitude: 0.5,
            period: 60.0,
        }
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        self.mean + self.amplitude * (TAU * t / self.period).sin()
    }

    /// Arc length travelled after `t` seconds.
    pub fn distance_at(&self, t: f64) -> f64 {
        self.mean * t + self.amplitude * self.period / TAU * (1.0 - (TAU * t / self.period).cos())
    }

    pub fn max_speed(&self) -> f64 {
        self.mean + self.amplitude.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// m
    pub loop_length: f64,
    pub n_landmarks: usize,
    pub duration_steps: usize,
    /// s
    pub dt: f64,
    pub speed: SpeedProfile,
    /// Relative amplitudes of the 2nd and 3rd radial harmonics of the loop.
    pub shape_harmonics: [f64; 2],
    /// Pole distance from the centerline, m.
    pub pole_offset: f64,
    /// Half range of the uniform jitter added to `pole_offset`, m.
    pub pole_offset_jitter: f64,
    pub half_width: f64,
    /// Amplitude of a slow lateral weave of the driven path, m (0 follows the centerline).
    pub lateral_wander: f64,
    /// Arc length where the drive starts, m.
    pub start_offset: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            loop_length: 1200.0,
            n_landmarks: 99,
            duration_steps: 4000,
            dt: 1.0 / 13.0,
            speed: SpeedProfile::default(),
            shape_harmonics: [0.12, 0.04],
            pole_offset: 6.0,
            pole_offset_jitter: 0.5,
            half_width: crate::map::DEFAULT_HALF_WIDTH,
            lateral_wander: 0.0,
            start_offset: 0.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("loop_length", self.loop_length),
            ("dt", self.dt),
            ("speed.mean", self.speed.mean),
            ("speed.period", self.speed.period),
            ("half_width", self.half_width),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("scenario {name} must be positive, got {v}")));
            }
        }
        if self.n_landmarks < 3 {
            return Err(Error::Config("scenario needs at least 3 landmarks".into()));
        }
        if self.duration_steps == 0 {
            return Err(Error::Config("scenario duration must be at least one step".into()));
        }
        if self.speed.amplitude.abs() >= self.speed.mean {
            return Err(Error::Config("speed amplitude must be below the mean speed".into()));
        }
        if self.shape_harmonics.iter().map(|a| a.abs()).sum::<f64>() >= 0.5 {
            return Err(Error::Config("shape harmonics too large for a simple loop".into()));
        }
        if self.pole_offset.partial_cmp(&self.pole_offset_jitter.abs()) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config("pole offset must exceed its jitter".into()));
        }
        Ok(())
    }
}

/// Arc-length parameterized closed curve.
#[derive(Debug, Clone)]
pub struct Course {
    points: Vec<[f64; 2]>,
    /// Cumulative arc length at each point; the last entry closes the loop.
    arc: Vec<f64>,
}

impl Course {
    /// Loop `r(phi) = R (1 + a2 cos(2 phi + p2) + a3 cos(3 phi + p3))`, scaled to `length`.
    pub fn ring(length: f64, harmonics: [f64; 2], phases: [f64; 2]) -> Self {
        let radius = |phi: f64| {
            1.0 + harmonics[0] * (2.0 * phi + phases[0]).cos() + harmonics[1] * (3.0 * phi + phases[1]).cos()
        };
        let unit: Vec<[f64; 2]> = (0..DENSE_SAMPLES)
            .map(|i| {
                let phi = TAU * i as f64 / DENSE_SAMPLES as f64;
                let r = radius(phi);
                [r * phi.cos(), r * phi.sin()]
            })
            .collect();
        let perimeter: f64 = (0..DENSE_SAMPLES)
            .map(|i| dist(unit[i], unit[(i + 1) % DENSE_SAMPLES]))
            .sum();
        let scale = length / perimeter;
        let points: Vec<[f64; 2]> = unit.iter().map(|p| [p[0] * scale, p[1] * scale]).collect();
        let mut arc = Vec::with_capacity(DENSE_SAMPLES + 1);
        arc.push(0.0);
        for i in 0..DENSE_SAMPLES {
            let next = arc[i] + dist(points[i], points[(i + 1) % DENSE_SAMPLES]);
            arc.push(next);
        }
        Self { points, arc }
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().expect("course has points")
    }

    /// Point at arc length `s` (wrapped onto the loop).
    pub fn point(&self, s: f64) -> [f64; 2] {
        let (i, f) = self.locate(s);
        let a = self.points[i];
        let b = self.points[(i + 1) % self.points.len()];
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }

    /// Unit tangent (direction of increasing `s`).
    pub fn tangent(&self, s: f64) -> [f64; 2] {
        let h = 0.5;
        let a = self.point(s - h);
        let b = self.point(s + h);
        let n = dist(a, b);
        [(b[0] - a[0]) / n, (b[1] - a[1]) / n]
    }

    /// Unit normal to the left of travel.
    pub fn left_normal(&self, s: f64) -> [f64; 2] {
        let t = self.tangent(s);
        [-t[1], t[0]]
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let len = self.length();
        let s = s.rem_euclid(len);
        let i = match self.arc.binary_search_by(|a| a.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
        .min(self.points.len() - 1);
        let span = self.arc[i + 1] - self.arc[i];
        (i, if span > 0.0 { (s - self.arc[i]) / span } else { 0.0 })
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Generated course, maps and ground truth.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub course: Course,
    pub map: HdMap,
    pub track: GroundTruthTrack,
    /// Arc length of each landmark's foot point on the centerline, by landmark index.
    pub landmark_arc: Vec<f64>,
    /// Largest fit residual over all segments, m.
    pub max_fit_residual: f64,
}

/// Least-squares cubic through `(u, v)` samples, returned as monomial
/// coefficients `[b3, b2, b1, b0]` in `u`. The fit is done in a centered and
/// scaled variable for conditioning.
fn fit_cubic(u: &[f64], v: &[f64]) -> Result<[f64; 4]> {
    let n = u.len();
    let (lo, hi) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let c = 0.5 * (lo + hi);
    let h = (0.5 * (hi - lo)).max(1e-9);
    let a = DMatrix::from_fn(n, 4, |i, j| ((u[i] - c) / h).powi(j as i32));
    let rhs = DVector::from_column_slice(v);
    let sol = a
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Generator(format!("cubic fit failed: {e}")))?;
    // p(u) = sum_j a_j ((u - c) / h)^j, expanded in powers of u
    let (a0, a1, a2, a3) = (sol[0], sol[1] / h, sol[2] / (h * h), sol[3] / (h * h * h));
    Ok([
        a3,
        a2 - 3.0 * a3 * c,
        a1 - 2.0 * a2 * c + 3.0 * a3 * c * c,
        a0 - a1 * c + a2 * c * c - a3 * c * c * c,
    ])
}

/// Builds the ring course, its poles and road map, and the drive along it.
/// Everything random (shape phases, pole jitter, wander phase) is drawn from `rng`.
pub fn build_ring_scenario<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Scenario> {
    cfg.validate()?;
    let phases = [rng.random::<f64>() * TAU, rng.random::<f64>() * TAU];
    let course = Course::ring(cfg.loop_length, cfg.shape_harmonics, phases);
    let len = course.length();
    let n = cfg.n_landmarks;
    let spacing = len / n as f64;

    let mut landmarks = Vec::with_capacity(n);
    let mut landmark_arc = Vec::with_capacity(n);
    for i in 0..n {
        let s = (i as f64 + 0.5) * spacing;
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let jitter = cfg.pole_offset_jitter * (2.0 * rng.random::<f64>() - 1.0);
        let offset = side * (cfg.pole_offset + jitter);
        let c = course.point(s);
        let nrm = course.left_normal(s);
        landmarks.push(Landmark::light_pole(i as u32, c[0] + offset * nrm[0], c[1] + offset * nrm[1]));
        landmark_arc.push(s);
    }

    let mut segments = Vec::with_capacity(n);
    let mut max_residual: f64 = 0.0;
    for i in 0..n {
        let (s0, s1) = ((i as f64 - 1.0) * spacing, (i as f64 + 2.0) * spacing);
        let m = ((s1 - s0) / FIT_STEP).ceil() as usize;
        let pts: Vec<[f64; 2]> = (0..=m).map(|k| course.point(s0 + (s1 - s0) * k as f64 / m as f64)).collect();
        let (tx, ty) = (pts[m][0] - pts[0][0], pts[m][1] - pts[0][1]);
        let axis = if tx.abs() >= ty.abs() { Axis::YOfX } else { Axis::XOfY };
        let (u, v): (Vec<f64>, Vec<f64>) = pts
            .iter()
            .map(|p| match axis {
                Axis::YOfX => (p[0], p[1]),
                Axis::XOfY => (p[1], p[0]),
            })
            .unzip();
        let coeffs = fit_cubic(&u, &v)?;
        let seg = RoadSegment {
            axis,
            coeffs,
            anchor_landmark_id: i as u32,
            param_range: [
                u.iter().copied().fold(f64::INFINITY, f64::min),
                u.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ],
        };
        let residual = pts.iter().map(|p| seg.centerline_offset(*p)).fold(0.0, f64::max);
        if residual > MAX_FIT_RESIDUAL {
            return Err(Error::Generator(format!(
                "segment {i} deviates {residual:.3} m from the course (limit {MAX_FIT_RESIDUAL} m)"
            )));
        }
        max_residual = max_residual.max(residual);
        segments.push(seg);
    }

    let map = HdMap::new(RoadMap::new(segments, cfg.half_width)?, LandmarkMap::new(landmarks)?)?;
    let wander_phase = rng.random::<f64>() * TAU;
    let track = drive_track(&course, cfg, wander_phase);
    Ok(Scenario {
        course,
        map,
        track,
        landmark_arc,
        max_fit_residual: max_residual,
    })
}

/// Drives `cfg.duration_steps` steps along `course` from `cfg.start_offset`,
/// following `cfg.speed` and weaving laterally by `cfg.lateral_wander`.
pub fn drive_track(course: &Course, cfg: &ScenarioConfig, wander_phase: f64) -> GroundTruthTrack {
    let len = course.length();
    let position = |t: f64| {
        let s = cfg.start_offset + cfg.speed.distance_at(t);
        let c = course.point(s);
        if cfg.lateral_wander == 0.0 {
            return c;
        }
        // two incommensurate weaves so the lateral position is not tied to the lap
        let w = cfg.lateral_wander
            * (0.6 * (TAU * s / 90.0 + wander_phase).sin() + 0.4 * (TAU * s / (len / 7.3) + 2.0 * wander_phase).sin());
        let nrm = course.left_normal(s);
        [c[0] + w * nrm[0], c[1] + w * nrm[1]]
    };
    let h = 1e-3;
    let states = (0..cfg.duration_steps)
        .map(|k| {
            let t = k as f64 * cfg.dt;
            let p = position(t);
            let (a, b) = (position(t - h), position(t + h));
            VehicleState::new(p[0], p[1], (b[0] - a[0]) / (2.0 * h), (b[1] - a[1]) / (2.0 * h))
        })
        .collect();
    GroundTruthTrack::from_states(cfg.dt, states)
}
