//! Planar HD map: road centerline as piecewise cubics anchored to landmarks,
//! plus the landmark table itself.
//!
//! Map files are JSON:
//!
//! ```json
//! {
//!   "half_width": 4.0,
//!   "landmarks": [{"id": 0, "x": 12.5, "y": -3.0, "class": "light_pole"}],
//!   "segments": [{"axis": "y_of_x", "coeffs": [0.0, 0.0, 0.1, 2.0], "anchor": 0, "range": [0.0, 12.0]}]
//! }
//! ```
//!
//! `coeffs` are `[b3, b2, b1, b0]`. For `y_of_x` the centerline is
//! `y = b3 x^3 + b2 x^2 + b1 x + b0`; for `x_of_y` the roles of the axes are
//! swapped. `range` is the interval of the independent coordinate the
//! segment was fitted on. Coordinates are meters in a local tangent plane.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HALF_WIDTH: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    #[serde(rename = "class")]
    pub class_label: String,
}

impl Landmark {
    pub fn light_pole(id: u32, x: f64, y: f64) -> Self {
        Self {
            id,
            x,
            y,
            class_label: "light_pole".to_string(),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, Default)]
pub struct LandmarkMap {
    landmarks: Vec<Landmark>,
    index: HashMap<u32, usize>,
}

impl LandmarkMap {
    pub fn new(landmarks: Vec<Landmark>) -> Result<Self> {
        let mut index = HashMap::with_capacity(landmarks.len());
        for (i, lm) in landmarks.iter().enumerate() {
            if !(lm.x.is_finite() && lm.y.is_finite()) {
                return Err(Error::Config(format!("landmark {} has non-finite coordinates", lm.id)));
            }
            if index.insert(lm.id, i).is_some() {
                return Err(Error::Config(format!("duplicate landmark id {}", lm.id)));
            }
        }
        Ok(Self { landmarks, index })
    }

    pub fn landmarks(&self) -> &[Landmark] {
        &self.landmarks
    }

    pub fn get(&self, id: u32) -> Option<&Landmark> {
        self.index.get(&id).map(|&i| &self.landmarks[i])
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Dependent coordinate is y, polynomial in x.
    YOfX,
    /// Dependent coordinate is x, polynomial in y.
    XOfY,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub axis: Axis,
    /// `[b3, b2, b1, b0]`
    pub coeffs: [f64; 4],
    #[serde(rename = "anchor")]
    pub anchor_landmark_id: u32,
    #[serde(rename = "range")]
    pub param_range: [f64; 2],
}

impl RoadSegment {
    pub fn eval(&self, t: f64) -> f64 {
        let [b3, b2, b1, b0] = self.coeffs;
        ((b3 * t + b2) * t + b1) * t + b0
    }

    /// Splits a point into (independent, dependent) coordinates for this segment.
    fn split(&self, point: [f64; 2]) -> (f64, f64) {
        match self.axis {
            Axis::YOfX => (point[0], point[1]),
            Axis::XOfY => (point[1], point[0]),
        }
    }

    pub fn in_range(&self, point: [f64; 2]) -> bool {
        let (t, _) = self.split(point);
        t >= self.param_range[0] && t <= self.param_range[1]
    }

    /// `|dependent - poly(independent)|`, evaluated even outside `param_range`.
    pub fn centerline_offset(&self, point: [f64; 2]) -> f64 {
        let (t, dep) = self.split(point);
        (dep - self.eval(t)).abs()
    }

    fn validate(&self) -> Result<()> {
        if !self.coeffs.iter().all(|c| c.is_finite()) {
            return Err(Error::Config(format!(
                "segment anchored at {} has non-finite coefficients",
                self.anchor_landmark_id
            )));
        }
        let [lo, hi] = self.param_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!(
                "segment anchored at {} has empty range [{lo}, {hi}]",
                self.anchor_landmark_id
            )));
        }
        Ok(())
    }
}

/// Free-function form of [`RoadSegment::centerline_offset`].
pub fn centerline_offset(segment: &RoadSegment, point: [f64; 2]) -> f64 {
    segment.centerline_offset(point)
}

pub fn planar_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone)]
pub struct RoadMap {
    segments: Vec<RoadSegment>,
    half_width: f64,
}

impl RoadMap {
    pub fn new(segments: Vec<RoadSegment>, half_width: f64) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Config("road map has no segments".into()));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::Config(format!("half_width must be positive, got {half_width}")));
        }
        for s in &segments {
            s.validate()?;
        }
        Ok(Self {
            segments,
            half_width,
        })
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Index of the segment whose anchor landmark is closest to `point`.
    ///
    /// Ties go to the lowest index. Segments whose anchor is missing from
    /// `landmarks` are skipped.
    pub fn nearest_segment(&self, point: [f64; 2], landmarks: &LandmarkMap) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, seg) in self.segments.iter().enumerate() {
            let Some(anchor) = landmarks.get(seg.anchor_landmark_id) else {
                continue;
            };
            let d = planar_distance(point, anchor.position());
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
            .ok_or_else(|| Error::Config("no road segment has an anchor in the landmark map".into()))
    }
}

/// Free-function form of [`RoadMap::nearest_segment`].
pub fn nearest_segment(map: &RoadMap, point: [f64; 2], landmarks: &LandmarkMap) -> Result<usize> {
    map.nearest_segment(point, landmarks)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    landmarks: Vec<Landmark>,
    segments: Vec<RoadSegment>,
    #[serde(default = "default_half_width")]
    half_width: f64,
}

fn default_half_width() -> f64 {
    DEFAULT_HALF_WIDTH
}

/// Road and landmark maps loaded together from one map document.
#[derive(Debug, Clone)]
pub struct HdMap {
    pub road: RoadMap,
    pub landmarks: LandmarkMap,
}

impl HdMap {
    pub fn new(road: RoadMap, landmarks: LandmarkMap) -> Result<Self> {
        for seg in road.segments() {
            if landmarks.get(seg.anchor_landmark_id).is_none() {
                return Err(Error::Config(format!(
                    "segment anchor {} is not a known landmark",
                    seg.anchor_landmark_id
                )));
            }
        }
        Ok(Self { road, landmarks })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MapFile = serde_json::from_str(text)?;
        let road = RoadMap::new(file.segments, file.half_width)?;
        let landmarks = LandmarkMap::new(file.landmarks)?;
        Self::new(road, landmarks)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MapFile {
            landmarks: self.landmarks.landmarks().to_vec(),
            segments: self.road.segments().to_vec(),
            half_width: self.road.half_width(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}
