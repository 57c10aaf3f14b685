//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintDefaults;
use crate::error::{Error, Result};
use crate::perception::{CameraModel, Feature, MatchConfig, NoiseModel, BB_FEATURES};
use crate::scenario::ScenarioConfig;

/// Which filters an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantSelection {
    Pf,
    Scpf,
    #[default]
    Both,
}

impl VariantSelection {
    pub fn variants(self) -> &'static [Variant] {
        match self {
            Self::Pf => &[Variant::Pf],
            Self::Scpf => &[Variant::Scpf],
            Self::Both => &[Variant::Pf, Variant::Scpf],
        }
    }
}

impl std::str::FromStr for VariantSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pf" => Ok(Self::Pf),
            "scpf" => Ok(Self::Scpf),
            "both" => Ok(Self::Both),
            other => Err(Error::Usage(format!("unknown variant '{other}', expected pf, scpf or both"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain bootstrap particle filter (position fixes only).
    Pf,
    /// Particle filter with soft road, speed and landmark constraints.
    Scpf,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Self::Pf => "pf",
            Self::Scpf => "scpf",
        }
    }

    pub fn index(self) -> u64 {
        match self {
            Self::Pf => 0,
            Self::Scpf => 1,
        }
    }
}

/// Systematic corruption of a fraction of the landmark predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    /// Multiply the predicted variance of the selected detections by `factor`.
    InflateVariance { fraction: f64, factor: f64 },
    /// Discard the selected detections.
    Drop { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Lateral weave amplitude of the data-collection drive, m.
    pub lateral_wander: f64,
    /// Start of the data-collection drive as a fraction of the loop.
    pub start_fraction: f64,
    /// Use every n-th camera frame of the drive.
    pub frame_stride: usize,
    pub max_per_expert: Option<usize>,
    pub components: usize,
    pub gmm_restarts: usize,
    pub gpr_restarts: usize,
    pub gpr_max_iters: usize,
    /// Pre-trained predictor bundle; when set, training is skipped.
    pub bundle: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lateral_wander: 1.5,
            start_fraction: 0.5,
            frame_stride: 4,
            max_per_expert: Some(200),
            components: 2,
            gmm_restarts: 3,
            gpr_restarts: 5,
            gpr_max_iters: 200,
            bundle: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    pub particles: usize,
    /// Process noise intensity for the plain filter, m^2/s^3.
    pub q_pf: f64,
    /// Process noise intensity for the constrained filter, m^2/s^3.
    pub q_scpf: f64,
    pub p0_diag: [f64; 4],
    pub resample_threshold: f64,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            particles: 500,
            q_pf: 4.0,
            q_scpf: 11.0,
            p0_diag: [10.0, 10.0, 2.5, 2.5],
            resample_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Position-fix noise levels, m.
    pub sigma_v: Vec<f64>,
    pub mc_runs: usize,
    pub variants: VariantSelection,
    /// When false the filters get no position fixes after initialization.
    pub gps: bool,
    /// Probability that a position fix is missing at a step.
    pub gps_dropout: f64,
    /// When false the constrained filter keeps road and speed constraints only.
    pub landmark_constraints: bool,
    pub perturbation: Option<Perturbation>,
    /// Worker threads; 0 picks the number of CPUs.
    pub parallel: usize,
    /// Also write per-step diagnostics of the first run of every cell.
    pub diagnostics: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sigma_v: vec![3.0, 5.0, 10.0, 15.0, 20.0],
            mc_runs: 50,
            variants: VariantSelection::Both,
            gps: true,
            gps_dropout: 0.0,
            landmark_constraints: true,
            perturbation: None,
            parallel: 0,
            diagnostics: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub repetitions: usize,
    pub train_fraction: f64,
    /// Use every n-th camera frame of the ablation drive.
    pub frame_stride: usize,
    /// Samples drawn from the near cluster for the feature comparison.
    pub near_samples: usize,
    /// Samples drawn from all clusters for the single-versus-mixture comparison.
    pub pooled_samples: usize,
    /// Optimizer iterations per repetition (fits start from the pilot fit).
    pub gpr_max_iters: usize,
    /// Features of the single-regressor baseline.
    pub single_selector: Vec<Feature>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            repetitions: 100,
            train_fraction: 0.8,
            frame_stride: 5,
            near_samples: 150,
            pooled_samples: 240,
            gpr_max_iters: 40,
            single_selector: BB_FEATURES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub camera: CameraModel,
    pub perception: NoiseModel,
    pub matching: MatchConfig,
    pub training: TrainingConfig,
    pub filter: FilterSettings,
    pub constraints: ConstraintDefaults,
    pub experiment: ExperimentConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.camera.validate()?;
        let e = &self.experiment;
        if e.sigma_v.is_empty() || e.sigma_v.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("experiment.sigma_v must be a non-empty list of positive values".into()));
        }
        if e.mc_runs == 0 {
            return Err(Error::Config("experiment.mc_runs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&e.gps_dropout) {
            return Err(Error::Config("experiment.gps_dropout must lie in [0, 1)".into()));
        }
        match e.perturbation {
            Some(Perturbation::InflateVariance { fraction, factor }) if !(0.0..=1.0).contains(&fraction) || factor.is_nan() || factor <= 0.0 => {
                return Err(Error::Config("variance inflation needs fraction in [0, 1] and a positive factor".into()));
            }
            Some(Perturbation::Drop { fraction }) if !(0.0..=1.0).contains(&fraction) => {
                return Err(Error::Config("drop fraction must lie in [0, 1]".into()));
            }
            _ => {}
        }
        let t = &self.training;
        if t.frame_stride == 0 || t.components == 0 {
            return Err(Error::Config("training.frame_stride and training.components must be positive".into()));
        }
        let a = &self.ablation;
        if a.single_selector.is_empty() {
            return Err(Error::Config("ablation.single_selector must name at least one feature".into()));
        }
        if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) || a.frame_stride == 0 {
            return Err(Error::Config("ablation.train_fraction must lie in (0, 1) and frame_stride be positive".into()));
        }
        let f = &self.filter;
        for q in [f.q_pf, f.q_scpf] {
            if !(q > 0.0 && q.is_finite()) {
                return Err(Error::Config(format!("process noise intensity must be positive, got {q}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[experiment]\nsigma_v = [3.0]\nmc_runs = 2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.experiment.mc_runs, 2);
        assert_eq!(cfg.filter.particles, 500);
    }

    #[test]
    fn perturbation_is_tagged() {
        let cfg = RunConfig::from_toml("[experiment.perturbation]\nkind = \"drop\"\nfraction = 0.5\n").unwrap();
        assert_eq!(cfg.experiment.perturbation, Some(Perturbation::Drop { fraction: 0.5 }));
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("[filter]\nparticels = 10\n").is_err());
        assert!(RunConfig::from_toml("[experiment]\nsigma_v = []\n").is_err());
        assert!(RunConfig::from_toml("[experiment]\nmc_runs = 0\n").is_err());
    }

    #[test]
    fn variant_selection_parses() {
        assert_eq!("pf".parse::<VariantSelection>().unwrap(), VariantSelection::Pf);
        assert_eq!("both".parse::<VariantSelection>().unwrap().variants().len(), 2);
        assert!("kf".parse::<VariantSelection>().is_err());
    }
}
