//! Synthetic stand-in for the camera and instance-segmentation front end.
//!
//! Poles are modelled as vertical cylinders with a horizontal arm and lamp at
//! the top. Closer than [`CameraModel::regime_range`] the pole top leaves the
//! image and the box is clipped at the top row (near regime); farther away the
//! whole pole including the arm is boxed (far regime).

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpr::{Prediction, TrainingSet};
use crate::map::{planar_distance, LandmarkMap};
use crate::state::VehicleState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub landmark_id: u32,
    /// Camera-to-landmark planar distance, meters.
    pub true_distance: f64,
}

/// One detected pole: bounding box extrema and segmented thickness, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionFeatures {
    pub frame_id: u64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub thickness: f64,
    pub truth: Option<Truth>,
}

impl DetectionFeatures {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let vals = [self.x1, self.y1, self.x2, self.y2, self.thickness];
        if !vals.iter().all(|v| v.is_finite()) {
            return Err("non-finite feature".into());
        }
        if self.x2 <= self.x1 {
            return Err(format!("x2 ({}) must exceed x1 ({})", self.x2, self.x1));
        }
        if self.y2 <= self.y1 {
            return Err(format!("y2 ({}) must exceed y1 ({})", self.y2, self.y1));
        }
        if self.thickness < 0.0 || self.thickness > self.x2 - self.x1 {
            return Err(format!(
                "thickness ({}) must lie in [0, x2 - x1 = {}]",
                self.thickness,
                self.x2 - self.x1
            ));
        }
        if let Some(t) = self.truth {
            if !(t.true_distance.is_finite() && t.true_distance >= 0.0) {
                return Err(format!("true_distance ({}) must be finite and non-negative", t.true_distance));
            }
        }
        Ok(())
    }

    pub fn feature(&self, f: Feature) -> f64 {
        match f {
            Feature::X1 => self.x1,
            Feature::X2 => self.x2,
            Feature::Y1 => self.y1,
            Feature::Y2 => self.y2,
            Feature::Thickness => self.thickness,
        }
    }

    pub fn select(&self, features: &[Feature]) -> Vec<f64> {
        features.iter().map(|&f| self.feature(f)).collect()
    }
}

/// Detection feature usable as a regression input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    X1,
    X2,
    Y1,
    Y2,
    Thickness,
}

/// Bounding-box features only.
pub const BB_FEATURES: [Feature; 4] = [Feature::X1, Feature::X2, Feature::Y1, Feature::Y2];
/// Bounding box plus segmented thickness.
pub const BB_SEG_FEATURES: [Feature; 5] = [Feature::X1, Feature::X2, Feature::Y1, Feature::Y2, Feature::Thickness];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoleGeometry {
    pub height: f64,
    pub radius: f64,
    pub arm_length: f64,
}

impl Default for PoleGeometry {
    fn default() -> Self {
        Self {
            height: 9.0,
            radius: 0.15,
            arm_length: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    pub focal_px: f64,
    pub image_w: f64,
    pub image_h: f64,
    /// Camera position in the body frame, `[forward, left]` meters.
    pub mount_offset: [f64; 2],
    pub mount_yaw: f64,
    /// Optical center height above the road, meters.
    pub mount_height: f64,
    pub max_range: f64,
    /// Planar distance below which the pole top is clipped out of the image.
    pub regime_range: f64,
    pub pole_geom: PoleGeometry,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            focal_px: 700.0,
            image_w: 1280.0,
            image_h: 720.0,
            mount_offset: [0.0, 0.0],
            mount_yaw: 0.0,
            mount_height: 2.0,
            max_range: 24.0,
            regime_range: 14.0,
            pole_geom: PoleGeometry::default(),
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px > 0.0 && self.image_w > 0.0 && self.image_h > 0.0 && self.max_range > 0.0) {
            return Err(Error::Config("camera focal length, image size and range must be positive".into()));
        }
        if !(self.mount_height > 0.0 && self.pole_geom.height > self.mount_height && self.pole_geom.radius > 0.0) {
            return Err(Error::Config("pole must be taller than the camera mount".into()));
        }
        Ok(())
    }

    /// Horizontal half field of view, radians.
    pub fn half_fov(&self) -> f64 {
        (0.5 * self.image_w / self.focal_px).atan()
    }

    /// Camera position and yaw for a vehicle pose.
    pub fn pose(&self, state: &VehicleState, heading: f64) -> ([f64; 2], f64) {
        let (s, c) = heading.sin_cos();
        let [fwd, left] = self.mount_offset;
        ([state.x + c * fwd - s * left, state.y + s * fwd + c * left], heading + self.mount_yaw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Independent noise on each box edge, pixels.
    pub pixel_sigma: f64,
    pub thickness_sigma: f64,
    /// Common vertical shift of the box from camera pitch jitter, pixels.
    pub vertical_jitter_px: f64,
    pub miss_base: f64,
    /// Miss probability added per meter of range.
    pub miss_range_scale: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            pixel_sigma: 2.0,
            thickness_sigma: 0.5,
            vertical_jitter_px: 10.0,
            miss_base: 0.0,
            miss_range_scale: 0.0035,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            pixel_sigma: 0.0,
            thickness_sigma: 0.0,
            vertical_jitter_px: 0.0,
            miss_base: 0.0,
            miss_range_scale: 0.0,
        }
    }

    pub fn miss_probability(&self, distance: f64) -> f64 {
        (self.miss_base + self.miss_range_scale * distance).clamp(0.0, 1.0)
    }

    fn validate(&self) -> Result<()> {
        let vals = [
            self.pixel_sigma,
            self.thickness_sigma,
            self.vertical_jitter_px,
            self.miss_base,
            self.miss_range_scale,
        ];
        if vals.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("noise parameters must be non-negative: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Near,
    Far,
}

/// Noise-free projection of one pole.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPole {
    pub landmark_id: u32,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub thickness: f64,
    pub depth: f64,
    pub distance: f64,
    pub regime: Regime,
}

/// Projects a landmark through the pinhole model; `None` when it is behind
/// the camera, out of the horizontal field of view or beyond `max_range`.
pub fn project_pole(cam: &CameraModel, cam_pos: [f64; 2], cam_yaw: f64, id: u32, pole: [f64; 2]) -> Option<ProjectedPole> {
    let dx = pole[0] - cam_pos[0];
    let dy = pole[1] - cam_pos[1];
    let (s, c) = cam_yaw.sin_cos();
    let depth = c * dx + s * dy;
    let right = s * dx - c * dy;
    if depth <= 0.0 {
        return None;
    }
    let distance = planar_distance(cam_pos, pole);
    if distance > cam.max_range {
        return None;
    }
    let f = cam.focal_px;
    let cx = 0.5 * cam.image_w;
    let cy = 0.5 * cam.image_h;
    let u = cx + f * right / depth;
    if !(0.0..=cam.image_w).contains(&u) {
        return None;
    }
    let half = f * cam.pole_geom.radius / depth;
    let y2 = (cy + f * cam.mount_height / depth).min(cam.image_h);
    let (x1, x2, y1, regime) = if distance <= cam.regime_range {
        (u - half, u + half, 0.0, Regime::Near)
    } else {
        // the arm reaches over the road, towards the optical axis
        let toward_axis = if right >= 0.0 { 1.0 } else { -1.0 };
        let arm_right = right - toward_axis * cam.pole_geom.arm_length;
        let u_arm = cx + f * arm_right / depth;
        let top = cy - f * (cam.pole_geom.height - cam.mount_height) / depth;
        ((u - half).min(u_arm), (u + half).max(u_arm), top.max(0.0), Regime::Far)
    };
    Some(ProjectedPole {
        landmark_id: id,
        x1: x1.clamp(0.0, cam.image_w),
        y1,
        x2: x2.clamp(0.0, cam.image_w),
        y2,
        thickness: 2.0 * half,
        depth,
        distance,
        regime,
    })
}

/// Synthesizes the detections one camera frame would produce.
///
/// Every visible landmark consumes the same number of random draws whether
/// or not it is missed, so the stream stays aligned across configurations.
pub fn synth_detections<R: Rng + ?Sized>(
    cam: &CameraModel,
    state: &VehicleState,
    heading: f64,
    map: &LandmarkMap,
    noise: &NoiseModel,
    frame_id: u64,
    rng: &mut R,
) -> Result<Vec<DetectionFeatures>> {
    noise.validate()?;
    let (cam_pos, yaw) = cam.pose(state, heading);
    let mut out = Vec::new();
    for lm in map.landmarks() {
        let Some(p) = project_pole(cam, cam_pos, yaw, lm.id, lm.position()) else {
            continue;
        };
        let miss_u: f64 = rng.random();
        let n: [f64; 6] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if miss_u < noise.miss_probability(p.distance) {
            continue;
        }
        let jitter = noise.vertical_jitter_px * n[4];
        let mut x1 = (p.x1 + noise.pixel_sigma * n[0]).clamp(0.0, cam.image_w);
        let mut x2 = (p.x2 + noise.pixel_sigma * n[1]).clamp(0.0, cam.image_w);
        let mut y1 = if p.y1 > 0.0 {
            (p.y1 + noise.pixel_sigma * n[2] + jitter).clamp(0.0, cam.image_h)
        } else {
            0.0
        };
        let mut y2 = (p.y2 + noise.pixel_sigma * n[3] + jitter).clamp(0.0, cam.image_h);
        if x2 - x1 < 1.0 {
            let mid = 0.5 * (x1 + x2);
            x1 = mid - 0.5;
            x2 = mid + 0.5;
        }
        if y2 - y1 < 1.0 {
            y1 = (y2 - 1.0).max(0.0);
            y2 = y1 + 1.0;
        }
        let thickness = (p.thickness + noise.thickness_sigma * n[5]).clamp(0.0, x2 - x1);
        out.push(DetectionFeatures {
            frame_id,
            x1,
            y1,
            x2,
            y2,
            thickness,
            truth: Some(Truth {
                landmark_id: lm.id,
                true_distance: p.distance,
            }),
        });
    }
    Ok(out)
}

/// One matched landmark with the distance predicted for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkMatch {
    /// Index of the detection within its frame.
    pub detection: usize,
    pub landmark_id: u32,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub frame_id: u64,
    pub matches: Vec<LandmarkMatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub gate_radius: f64,
    /// When set, candidates must lie within this bearing (radians) of the
    /// estimated direction of travel. Ignored below 1 m/s estimated speed.
    pub max_bearing: Option<f64>,
    /// Pairs whose distance residual exceeds this many meters are never matched.
    pub max_residual: f64,
    /// Added to every predicted camera distance to approximate the
    /// body-to-landmark distance (forward camera offset).
    pub body_offset: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            gate_radius: 30.0,
            max_bearing: Some(std::f64::consts::FRAC_PI_2),
            max_residual: 4.0,
            body_offset: 0.0,
        }
    }
}

/// Associates predicted detections with map landmarks.
///
/// Candidates are the landmarks within `gate_radius` of `last_estimate`
/// (and, optionally, within `max_bearing` of its direction of travel).
/// Each (detection, candidate) pair is scored by how far the candidate's
/// distance from the estimate is from the predicted distance; pairs within
/// `max_residual` are accepted greedily by ascending residual, one-to-one.
pub fn match_landmarks(
    frame_id: u64,
    dets: &[(DetectionFeatures, Prediction)],
    map: &LandmarkMap,
    last_estimate: &VehicleState,
    cfg: &MatchConfig,
) -> DetectionEvent {
    let pos = last_estimate.position();
    let heading = (last_estimate.speed() >= 1.0).then(|| last_estimate.vy.atan2(last_estimate.vx));
    let candidates: Vec<(u32, f64)> = map
        .landmarks()
        .iter()
        .filter_map(|lm| {
            let d = planar_distance(pos, lm.position());
            if d > cfg.gate_radius {
                return None;
            }
            if let (Some(max_b), Some(h)) = (cfg.max_bearing, heading) {
                let b = (lm.y - pos[1]).atan2(lm.x - pos[0]) - h;
                let b = (b + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
                if b.abs() > max_b {
                    return None;
                }
            }
            Some((lm.id, d))
        })
        .collect();

    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(dets.len() * candidates.len());
    for (i, (_, pred)) in dets.iter().enumerate() {
        for (j, (_, d)) in candidates.iter().enumerate() {
            let residual = (d - (pred.mean + cfg.body_offset)).abs();
            if residual <= cfg.max_residual {
                pairs.push((residual, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; dets.len()];
    let mut cand_used = vec![false; candidates.len()];
    let mut matched: Vec<(usize, LandmarkMatch)> = Vec::new();
    for (_, i, j) in pairs {
        if det_used[i] || cand_used[j] {
            continue;
        }
        det_used[i] = true;
        cand_used[j] = true;
        let mut prediction = dets[i].1;
        prediction.mean += cfg.body_offset;
        matched.push((
            i,
            LandmarkMatch {
                detection: i,
                landmark_id: candidates[j].0,
                prediction,
            },
        ));
    }
    matched.sort_by_key(|(i, _)| *i);
    DetectionEvent {
        frame_id,
        matches: matched.into_iter().map(|(_, m)| m).collect(),
    }
}

/// Builds a regression training set from detections with ground truth.
pub fn build_training_set(dets: &[DetectionFeatures], selector: &[Feature]) -> Result<TrainingSet> {
    let mut inputs = Vec::with_capacity(dets.len());
    let mut targets = Vec::with_capacity(dets.len());
    for (i, d) in dets.iter().enumerate() {
        let truth = d
            .truth
            .ok_or_else(|| Error::Usage(format!("detection {i} (frame {}) has no ground truth", d.frame_id)))?;
        inputs.push(d.select(selector));
        targets.push(truth.true_distance);
    }
    TrainingSet::new(inputs, targets)
}

pub const DATASET_HEADER: [&str; 8] = [
    "frame_id",
    "x1",
    "y1",
    "x2",
    "y2",
    "thickness",
    "landmark_id",
    "true_distance",
];

#[derive(Debug, Serialize, Deserialize)]
struct DatasetRow {
    frame_id: u64,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    thickness: f64,
    landmark_id: Option<u32>,
    true_distance: Option<f64>,
}

/// Writes detections as CSV. Pixel columns are in pixels, `true_distance`
/// in meters; truth columns are empty when unknown.
pub fn dataset_write(path: impl AsRef<Path>, dets: &[DetectionFeatures]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    dataset_write_to(file, dets).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn dataset_write_to<W: std::io::Write>(w: W, dets: &[DetectionFeatures]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    let to_io = |e: csv::Error| Error::io("<csv>", std::io::Error::other(e));
    wr.write_record(DATASET_HEADER).map_err(to_io)?;
    for d in dets {
        wr.serialize(DatasetRow {
            frame_id: d.frame_id,
            x1: d.x1,
            y1: d.y1,
            x2: d.x2,
            y2: d.y2,
            thickness: d.thickness,
            landmark_id: d.truth.map(|t| t.landmark_id),
            true_distance: d.truth.map(|t| t.true_distance),
        })
        .map_err(to_io)?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn dataset_read(path: impl AsRef<Path>) -> Result<Vec<DetectionFeatures>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    dataset_read_from(file)
}

pub fn dataset_read_from<R: std::io::Read>(r: R) -> Result<Vec<DetectionFeatures>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let headers = rd.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().ne(DATASET_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", DATASET_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rd.deserialize::<DatasetRow>() {
        let row = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        // header is line 1, first data row line 2
        let line = out.len() as u64 + 2;
        let truth = match (row.landmark_id, row.true_distance) {
            (Some(landmark_id), Some(true_distance)) => Some(Truth {
                landmark_id,
                true_distance,
            }),
            (None, None) => None,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: "landmark_id and true_distance must be both present or both empty".into(),
                })
            }
        };
        let det = DetectionFeatures {
            frame_id: row.frame_id,
            x1: row.x1,
            y1: row.y1,
            x2: row.x2,
            y2: row.y2,
            thickness: row.thickness,
            truth,
        };
        det.validate().map_err(|message| Error::Parse { line, message })?;
        out.push(det);
    }
    Ok(out)
}
