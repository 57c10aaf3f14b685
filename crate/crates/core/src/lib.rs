//! Landmark-aided vehicle localization with a soft-constrained particle
//! filter.
//!
//! Camera detections of light poles are turned into distance predictions by
//! a gated mixture of Gaussian-process experts; each prediction becomes a
//! soft constraint whose width follows the predicted variance. Road and
//! speed constraints come from an HD map. A synthetic ring-road scenario and
//! a Monte Carlo harness evaluate the filter against an unconstrained
//! baseline.

pub mod config;
pub mod constraints;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod gmm;
pub mod gpr;
pub mod map;
pub mod moe;
mod optim;
pub mod perception;
pub mod scenario;
pub mod seeds;
pub mod state;

pub use config::{Perturbation, RunConfig, Variant, VariantSelection};
pub use constraints::{ConstraintSet, LikelihoodMode, SoftConstraint, UncertaintyModel};
pub use error::{Error, Result};
pub use experiment::{emit_results, run_ablation, run_experiment, AblationReport, Experiment, RunMetrics};
pub use filter::{FilterConfig, GroundTruthTrack, ParticleSet};
pub use gmm::GmmModel;
pub use gpr::{GprModel, KernelParams, Prediction, TrainingSet};
pub use map::{HdMap, Landmark, LandmarkMap, RoadMap, RoadSegment};
pub use moe::MoeDistancePredictor;
pub use perception::{CameraModel, DetectionEvent, DetectionFeatures, Feature, NoiseModel};
pub use scenario::{Scenario, ScenarioConfig};
pub use state::VehicleState;
