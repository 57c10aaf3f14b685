//! Soft state constraints `C(x) - gamma <= 0` with random non-negative slack
//! `gamma`, and the per-particle likelihood factors derived from them.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::Result;
use crate::map::{planar_distance, LandmarkMap, RoadMap, RoadSegment};
use crate::perception::DetectionEvent;
use crate::state::VehicleState;

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;
const LN_SQRT_PI: f64 = 0.572_364_942_924_700_1;

/// Distribution of the slack variable gamma (support gamma >= 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum UncertaintyModel {
    Exponential { mu: f64 },
    TruncGauss { sigma2: f64 },
}

impl UncertaintyModel {
    pub fn is_valid(&self) -> bool {
        match *self {
            Self::Exponential { mu } => mu > 0.0 && mu.is_finite(),
            Self::TruncGauss { sigma2 } => sigma2 > 0.0 && sigma2.is_finite(),
        }
    }
}

/// Density of the slack variable.
pub fn gamma_pdf(u: &UncertaintyModel, gamma: f64) -> f64 {
    if gamma < 0.0 {
        return 0.0;
    }
    match *u {
        UncertaintyModel::Exponential { mu } => (-gamma / mu).exp() / mu,
        UncertaintyModel::TruncGauss { sigma2 } => {
            let sigma = sigma2.sqrt();
            2.0 / (SQRT_2PI * sigma) * (-gamma * gamma / (2.0 * sigma2)).exp()
        }
    }
}

/// How a constraint value becomes a particle-weight factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodMode {
    /// `P(gamma >= C)`: probability the slack absorbs the violation.
    #[default]
    Survival,
    /// `p(max(C, 0)) / p(0)`.
    Pdf,
}

/// `ln erfc(x)` for `x >= 0`, accurate past the point where `erfc` underflows.
fn ln_erfc(x: f64) -> f64 {
    if x < 25.0 {
        erfc(x).ln()
    } else {
        let x2 = x * x;
        -x2 - x.ln() - LN_SQRT_PI + (1.0 - 0.5 / x2 + 0.75 / (x2 * x2)).ln()
    }
}

/// Natural log of [`constraint_likelihood`].
pub fn log_constraint_likelihood(u: &UncertaintyModel, c: f64, mode: LikelihoodMode) -> f64 {
    if c <= 0.0 {
        return 0.0;
    }
    match (mode, *u) {
        (_, UncertaintyModel::Exponential { mu }) => -c / mu,
        (LikelihoodMode::Survival, UncertaintyModel::TruncGauss { sigma2 }) => {
            ln_erfc(c / (2.0 * sigma2).sqrt())
        }
        (LikelihoodMode::Pdf, UncertaintyModel::TruncGauss { sigma2 }) => -c * c / (2.0 * sigma2),
    }
}

/// Weight factor in (0, 1] for constraint value `c`; 1 whenever `c <= 0`.
///
/// For the exponential slack both modes coincide (`exp(-c/mu)`).
pub fn constraint_likelihood(u: &UncertaintyModel, c: f64, mode: LikelihoodMode) -> f64 {
    if c <= 0.0 {
        return 1.0;
    }
    match (mode, *u) {
        (LikelihoodMode::Survival, UncertaintyModel::TruncGauss { sigma2 }) => erfc(c / (2.0 * sigma2).sqrt()),
        _ => log_constraint_likelihood(u, c, mode).exp(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintKind {
    /// Distance from the road centerline beyond the half width.
    Road { segment: RoadSegment, half_width: f64 },
    /// Speed above `vmax`.
    Speed { vmax: f64 },
    /// Mismatch between the distance to a landmark and its predicted distance.
    Landmark { position: [f64; 2], mu_star: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftConstraint {
    pub kind: ConstraintKind,
    pub uncertainty: UncertaintyModel,
}

impl SoftConstraint {
    /// Constraint function value `C(x)` (meters or m/s).
    #[inline]
    pub fn eval(&self, x: &VehicleState) -> f64 {
        match &self.kind {
            ConstraintKind::Road { segment, half_width } => segment.centerline_offset(x.position()) - half_width,
            ConstraintKind::Speed { vmax } => x.speed() - vmax,
            ConstraintKind::Landmark { position, mu_star } => (planar_distance(x.position(), *position) - mu_star).abs(),
        }
    }

    pub fn is_landmark(&self) -> bool {
        matches!(self.kind, ConstraintKind::Landmark { .. })
    }
}

/// Free-function form of [`SoftConstraint::eval`].
pub fn eval_constraint(c: &SoftConstraint, x: &VehicleState) -> f64 {
    c.eval(x)
}

/// Constraints active at one time step. Slack variables are independent,
/// so the joint factor is the product of the individual factors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintSet {
    pub constraints: Vec<SoftConstraint>,
    pub mode: LikelihoodMode,
}

impl ConstraintSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    #[inline]
    pub fn log_likelihood(&self, x: &VehicleState) -> f64 {
        self.constraints
            .iter()
            .map(|c| log_constraint_likelihood(&c.uncertainty, c.eval(x), self.mode))
            .sum()
    }

    pub fn likelihood(&self, x: &VehicleState) -> f64 {
        self.constraints
            .iter()
            .map(|c| constraint_likelihood(&c.uncertainty, c.eval(x), self.mode))
            .product()
    }
}

/// Free-function form of [`ConstraintSet::likelihood`].
pub fn set_likelihood(set: &ConstraintSet, x: &VehicleState) -> f64 {
    set.likelihood(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintDefaults {
    pub mu_road: f64,
    pub mu_speed: f64,
    pub vmax: f64,
    pub half_width: f64,
    /// Lower bound on the landmark slack variance, m^2.
    pub variance_floor: f64,
    pub likelihood_mode: LikelihoodMode,
}

impl Default for ConstraintDefaults {
    fn default() -> Self {
        Self {
            mu_road: 0.25,
            mu_speed: 1.0,
            vmax: 12.0,
            half_width: crate::map::DEFAULT_HALF_WIDTH,
            variance_floor: 0.05 * 0.05,
            likelihood_mode: LikelihoodMode::Survival,
        }
    }
}

/// Road and speed constraints plus one landmark constraint per match.
///
/// The road segment is picked once, from `last_estimate`, and shared by every
/// particle. Landmark slack variance is the prediction's noise-inclusive
/// variance, floored at `defaults.variance_floor`.
pub fn build_frame_constraints(
    road: &RoadMap,
    landmarks: &LandmarkMap,
    event: &DetectionEvent,
    last_estimate: &VehicleState,
    defaults: &ConstraintDefaults,
) -> Result<ConstraintSet> {
    let seg_idx = road.nearest_segment(last_estimate.position(), landmarks)?;
    let segment = road.segments()[seg_idx].clone();
    if !segment.in_range(last_estimate.position()) {
        log::trace!(
            "estimate ({:.1}, {:.1}) outside segment {seg_idx} range, extrapolating",
            last_estimate.x,
            last_estimate.y
        );
    }
    let mut constraints = Vec::with_capacity(2 + event.matches.len());
    constraints.push(SoftConstraint {
        kind: ConstraintKind::Road {
            segment,
            half_width: defaults.half_width,
        },
        uncertainty: UncertaintyModel::Exponential { mu: defaults.mu_road },
    });
    constraints.push(SoftConstraint {
        kind: ConstraintKind::Speed { vmax: defaults.vmax },
        uncertainty: UncertaintyModel::Exponential { mu: defaults.mu_speed },
    });
    for m in &event.matches {
        let Some(lm) = landmarks.get(m.landmark_id) else {
            continue;
        };
        constraints.push(SoftConstraint {
            kind: ConstraintKind::Landmark {
                position: lm.position(),
                mu_star: m.prediction.mean.max(0.0),
            },
            uncertainty: UncertaintyModel::TruncGauss {
                sigma2: m.prediction.variance_with_noise.max(defaults.variance_floor),
            },
        });
    }
    Ok(ConstraintSet {
        constraints,
        mode: defaults.likelihood_mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpr::Prediction;
    use crate::map::{Axis, Landmark};
    use crate::perception::LandmarkMatch;
    use proptest::prelude::*;

    fn speed(vmax: f64) -> SoftConstraint {
        SoftConstraint {
            kind: ConstraintKind::Speed { vmax },
            uncertainty: UncertaintyModel::Exponential { mu: 1.0 },
        }
    }

    fn flat_road() -> SoftConstraint {
        SoftConstraint {
            kind: ConstraintKind::Road {
                segment: RoadSegment {
                    axis: Axis::YOfX,
                    coeffs: [0.0; 4],
                    anchor_landmark_id: 0,
                    param_range: [-50.0, 50.0],
                },
                half_width: 4.0,
            },
            uncertainty: UncertaintyModel::Exponential { mu: 0.25 },
        }
    }

    #[test]
    fn eval_examples() {
        assert_eq!(speed(12.0).eval(&VehicleState::new(1.0, 2.0, 3.0, 4.0)), -7.0);
        assert_eq!(flat_road().eval(&VehicleState::new(0.0, 5.0, 0.0, 0.0)), 1.0);
        let lm = SoftConstraint {
            kind: ConstraintKind::Landmark {
                position: [3.0, 4.0],
                mu_star: 5.0,
            },
            uncertainty: UncertaintyModel::TruncGauss { sigma2: 1.0 },
        };
        assert_eq!(lm.eval(&VehicleState::default()), 0.0);
    }

    #[test]
    fn pdf_examples() {
        assert_eq!(gamma_pdf(&UncertaintyModel::Exponential { mu: 0.25 }, 0.0), 4.0);
        let g = gamma_pdf(&UncertaintyModel::TruncGauss { sigma2: 1.0 }, 0.0);
        assert!((g - 0.797_884_560_802_865_4).abs() < 1e-12);
        assert_eq!(gamma_pdf(&UncertaintyModel::Exponential { mu: 2.0 }, -1.0), 0.0);
        assert_eq!(gamma_pdf(&UncertaintyModel::TruncGauss { sigma2: 2.0 }, -1.0), 0.0);
    }

    #[test]
    fn likelihood_examples() {
        let e = UncertaintyModel::Exponential { mu: 0.25 };
        let g = UncertaintyModel::TruncGauss { sigma2: 1.0 };
        for mode in [LikelihoodMode::Survival, LikelihoodMode::Pdf] {
            assert_eq!(constraint_likelihood(&e, -3.0, mode), 1.0);
            assert_eq!(constraint_likelihood(&g, 0.0, mode), 1.0);
        }
        assert!((constraint_likelihood(&e, 0.25, LikelihoodMode::Survival) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((constraint_likelihood(&g, 1.0, LikelihoodMode::Survival) - 0.317_310_507_862_914_1).abs() < 1e-9);
        assert!((constraint_likelihood(&g, 1.0, LikelihoodMode::Pdf) - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn log_likelihood_survives_extreme_violations() {
        let g = UncertaintyModel::TruncGauss { sigma2: 0.0025 };
        let l = log_constraint_likelihood(&g, 10.0, LikelihoodMode::Survival);
        assert!(l.is_finite() && l < -19000.0);
        // the asymptotic branch agrees with the direct evaluation where both are representable
        for x in [25.0f64, 26.0] {
            let direct = erfc(x).ln();
            let x2 = x * x;
            let asym = -x2 - x.ln() - LN_SQRT_PI + (1.0 - 0.5 / x2 + 0.75 / (x2 * x2)).ln();
            assert!((direct - asym).abs() < 1e-7 * direct.abs(), "{direct} {asym}");
        }
    }

    #[test]
    fn set_likelihood_examples() {
        let x = VehicleState::new(0.0, 5.0, 15.0, 0.0);
        assert_eq!(ConstraintSet::empty().likelihood(&x), 1.0);
        let (a, b) = (flat_road(), speed(12.0));
        let fa = constraint_likelihood(&a.uncertainty, a.eval(&x), LikelihoodMode::Survival);
        let fb = constraint_likelihood(&b.uncertainty, b.eval(&x), LikelihoodMode::Survival);
        let set = ConstraintSet {
            constraints: vec![a, b],
            mode: LikelihoodMode::Survival,
        };
        assert!((set.likelihood(&x) - fa * fb).abs() < 1e-15);
        assert!((set.log_likelihood(&x) - (fa * fb).ln()).abs() < 1e-12);
        assert_eq!(set.likelihood(&VehicleState::new(0.0, 1.0, 3.0, 0.0)), 1.0);
    }

    fn event(variances: &[f64]) -> DetectionEvent {
        DetectionEvent {
            frame_id: 0,
            matches: variances
                .iter()
                .enumerate()
                .map(|(i, &v)| LandmarkMatch {
                    detection: i,
                    landmark_id: i as u32,
                    prediction: Prediction {
                        mean: 10.0,
                        variance: v,
                        variance_with_noise: v,
                    },
                })
                .collect(),
        }
    }

    fn fixture() -> (RoadMap, LandmarkMap) {
        let lms = LandmarkMap::new(vec![
            Landmark::light_pole(0, 0.0, 6.0),
            Landmark::light_pole(1, 12.0, -6.0),
        ])
        .unwrap();
        let road = RoadMap::new(
            vec![RoadSegment {
                axis: Axis::YOfX,
                coeffs: [0.0; 4],
                anchor_landmark_id: 0,
                param_range: [-6.0, 6.0],
            }],
            4.0,
        )
        .unwrap();
        (road, lms)
    }

    #[test]
    fn frame_constraint_counts_and_floor() {
        let (road, lms) = fixture();
        let d = ConstraintDefaults::default();
        let x = VehicleState::default();
        assert_eq!(build_frame_constraints(&road, &lms, &event(&[0.2, 0.3]), &x, &d).unwrap().len(), 4);
        assert_eq!(build_frame_constraints(&road, &lms, &event(&[]), &x, &d).unwrap().len(), 2);
        let set = build_frame_constraints(&road, &lms, &event(&[1e-9]), &x, &d).unwrap();
        assert_eq!(
            set.constraints[2].uncertainty,
            UncertaintyModel::TruncGauss { sigma2: d.variance_floor }
        );
    }

    #[test]
    fn larger_variance_relaxes_landmark_constraint() {
        let (road, lms) = fixture();
        let d = ConstraintDefaults::default();
        let x = VehicleState::new(1.0, 0.0, 0.0, 0.0);
        let tight = build_frame_constraints(&road, &lms, &event(&[0.5]), &x, &d).unwrap();
        let loose = build_frame_constraints(&road, &lms, &event(&[5.0]), &x, &d).unwrap();
        let c = tight.constraints[2].eval(&x);
        assert!(c > 0.0);
        assert!(loose.likelihood(&x) > tight.likelihood(&x));
    }

    fn any_model() -> impl Strategy<Value = UncertaintyModel> {
        prop_oneof![
            (0.05..10.0f64).prop_map(|mu| UncertaintyModel::Exponential { mu }),
            (0.001..50.0f64).prop_map(|sigma2| UncertaintyModel::TruncGauss { sigma2 }),
        ]
    }

    fn any_mode() -> impl Strategy<Value = LikelihoodMode> {
        prop_oneof![Just(LikelihoodMode::Survival), Just(LikelihoodMode::Pdf)]
    }

    proptest! {
        #[test]
        fn likelihood_monotone_and_bounded(u in any_model(), mode in any_mode(), a in -5.0..20.0f64, b in -5.0..20.0f64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let fl = constraint_likelihood(&u, lo, mode);
            let fh = constraint_likelihood(&u, hi, mode);
            prop_assert!(fl >= fh);
            prop_assert!(fh >= 0.0 && fl <= 1.0);
            if lo <= 0.0 { prop_assert_eq!(fl, 1.0); }
        }

        #[test]
        fn landmark_factor_increases_with_variance(c in 0.01..10.0f64, s1 in 0.01..10.0f64, ratio in 1.01..100.0f64) {
            let mode = LikelihoodMode::Survival;
            let tight = constraint_likelihood(&UncertaintyModel::TruncGauss { sigma2: s1 }, c, mode);
            let loose = constraint_likelihood(&UncertaintyModel::TruncGauss { sigma2: s1 * ratio }, c, mode);
            prop_assert!(loose > tight || (tight == 1.0 && loose == 1.0));
        }

        #[test]
        fn set_likelihood_permutation_invariant(
            xs in proptest::collection::vec((-20.0..20.0f64, -20.0..20.0f64, 0.0..30.0f64), 1..8),
            px in -20.0..20.0f64, py in -20.0..20.0f64,
        ) {
            let cs: Vec<SoftConstraint> = xs.iter().map(|&(lx, ly, mu)| SoftConstraint {
                kind: ConstraintKind::Landmark { position: [lx, ly], mu_star: mu },
                uncertainty: UncertaintyModel::TruncGauss { sigma2: 1.0 + mu * 0.1 },
            }).collect();
            let mut rev = cs.clone();
            rev.reverse();
            let x = VehicleState::new(px, py, 0.0, 0.0);
            let a = ConstraintSet { constraints: cs, mode: LikelihoodMode::Survival };
            let b = ConstraintSet { constraints: rev, mode: LikelihoodMode::Survival };
            let (la, lb) = (a.likelihood(&x), b.likelihood(&x));
            prop_assert!((la - lb).abs() <= 1e-12 * la.abs().max(1e-300));
        }
    }
}
