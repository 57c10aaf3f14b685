//! Mixture of GPR experts behind a GMM gate with winner-take-all routing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{gmm_fit, GmmModel, GmmOptions};
use crate::gpr::{self, FitOptions, GprModel, GprModelDocument, InitParams, KernelParams, Prediction};
use crate::perception::{build_training_set, DetectionFeatures, Feature, BB_FEATURES, BB_SEG_FEATURES};
use crate::seeds::derive_seed;

pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

/// `[box width / box height, thickness]`
pub fn extract_gating_features(det: &DetectionFeatures) -> [f64; 2] {
    [(det.x2 - det.x1) / (det.y2 - det.y1), det.thickness]
}

#[derive(Debug, Clone)]
pub struct MoeDistancePredictor {
    gate: GmmModel,
    experts: Vec<GprModel>,
    selectors: Vec<Vec<Feature>>,
}

impl MoeDistancePredictor {
    pub fn new(gate: GmmModel, experts: Vec<GprModel>, selectors: Vec<Vec<Feature>>) -> Result<Self> {
        if gate.dim() != 2 {
            return Err(Error::Usage(format!("gate must use 2 features, got {}", gate.dim())));
        }
        if experts.len() != gate.n_components() || selectors.len() != experts.len() {
            return Err(Error::Usage(format!(
                "{} gate components, {} experts, {} selectors",
                gate.n_components(),
                experts.len(),
                selectors.len()
            )));
        }
        for (k, (e, s)) in experts.iter().zip(&selectors).enumerate() {
            if e.n_features() != s.len() {
                return Err(Error::Usage(format!(
                    "expert {k} takes {} features but its selector lists {}",
                    e.n_features(),
                    s.len()
                )));
            }
        }
        Ok(Self {
            gate,
            experts,
            selectors,
        })
    }

    pub fn gate(&self) -> &GmmModel {
        &self.gate
    }

    pub fn experts(&self) -> &[GprModel] {
        &self.experts
    }

    pub fn selectors(&self) -> &[Vec<Feature>] {
        &self.selectors
    }

    pub fn route(&self, det: &DetectionFeatures) -> usize {
        self.gate.assign(&extract_gating_features(det))
    }

    /// Prediction of the single expert the gate routes `det` to.
    pub fn predict(&self, det: &DetectionFeatures) -> Result<Prediction> {
        let k = self.route(det);
        self.experts[k].predict(&det.select(&self.selectors[k]))
    }

    pub fn to_document(&self) -> MoeBundleDocument {
        MoeBundleDocument {
            schema_version: BUNDLE_SCHEMA_VERSION,
            gate: self.gate.clone(),
            experts: self.experts.iter().map(GprModel::to_document).collect(),
            selectors: self.selectors.clone(),
        }
    }

    pub fn from_document(doc: MoeBundleDocument) -> Result<Self> {
        if doc.schema_version != BUNDLE_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported predictor bundle schema version {}",
                doc.schema_version
            )));
        }
        let experts = doc
            .experts
            .into_iter()
            .map(GprModel::from_document)
            .collect::<Result<Vec<_>>>()?;
        Self::new(doc.gate, experts, doc.selectors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_document())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_document(serde_json::from_str(&text)?)
    }
}

/// Free-function form of [`MoeDistancePredictor::predict`].
pub fn moe_predict(moe: &MoeDistancePredictor, det: &DetectionFeatures) -> Result<Prediction> {
    moe.predict(det)
}

/// Persisted predictor: gate, every expert and the feature selectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoeBundleDocument {
    pub schema_version: u32,
    pub gate: GmmModel,
    pub experts: Vec<GprModelDocument>,
    pub selectors: Vec<Vec<Feature>>,
}

#[derive(Debug, Clone)]
pub struct MoeTrainOptions {
    pub components: usize,
    pub gmm: GmmOptions,
    pub gpr: FitOptions,
    /// Cap on training samples per expert (evenly thinned); `None` keeps all.
    pub max_per_expert: Option<usize>,
    /// Selector for the expert whose cluster has the smallest mean distance.
    pub near_selector: Vec<Feature>,
    /// Selector for every other expert.
    pub far_selector: Vec<Feature>,
    /// Initial hyperparameters per distance rank (near first); missing
    /// entries use automatic initialization.
    pub warm_start: Vec<KernelParams>,
}

impl Default for MoeTrainOptions {
    fn default() -> Self {
        Self {
            components: 2,
            gmm: GmmOptions::default(),
            gpr: FitOptions::default(),
            max_per_expert: None,
            near_selector: BB_SEG_FEATURES.to_vec(),
            far_selector: BB_FEATURES.to_vec(),
            warm_start: Vec::new(),
        }
    }
}

/// Picks `max` evenly spaced elements, keeping order.
pub fn thin<T: Clone>(items: &[T], max: Option<usize>) -> Vec<T> {
    match max {
        Some(m) if items.len() > m && m > 0 => (0..m).map(|i| items[i * items.len() / m].clone()).collect(),
        _ => items.to_vec(),
    }
}

/// Clusters detections by gating features, orders clusters by mean true
/// distance and fits one GPR expert per cluster.
pub fn train_moe(dets: &[DetectionFeatures], opts: &MoeTrainOptions) -> Result<MoeDistancePredictor> {
    if dets.iter().any(|d| d.truth.is_none()) {
        return Err(Error::Usage("every training detection needs ground truth".into()));
    }
    let gating: Vec<Vec<f64>> = dets.iter().map(|d| extract_gating_features(d).to_vec()).collect();
    let gate = gmm_fit(&gating, opts.components, &opts.gmm)?;
    let k = gate.n_components();
    let mut clusters: Vec<Vec<DetectionFeatures>> = vec![Vec::new(); k];
    for (d, g) in dets.iter().zip(&gating) {
        clusters[gate.assign(g)].push(*d);
    }
    let mean_distance = |c: &Vec<DetectionFeatures>| {
        if c.is_empty() {
            f64::INFINITY
        } else {
            c.iter().map(|d| d.truth.unwrap().true_distance).sum::<f64>() / c.len() as f64
        }
    };
    let mut ranked: Vec<usize> = (0..k).collect();
    ranked.sort_by(|&a, &b| mean_distance(&clusters[a]).total_cmp(&mean_distance(&clusters[b])).then(a.cmp(&b)));

    let mut experts: Vec<Option<GprModel>> = vec![None; k];
    let mut selectors: Vec<Vec<Feature>> = vec![Vec::new(); k];
    for (rank, &comp) in ranked.iter().enumerate() {
        let selector = if rank == 0 {
            opts.near_selector.clone()
        } else {
            opts.far_selector.clone()
        };
        let data = thin(&clusters[comp], opts.max_per_expert);
        if data.len() < 2 {
            return Err(Error::Fit(format!(
                "gate component {comp} received {} training detections",
                data.len()
            )));
        }
        let ts = build_training_set(&data, &selector)?;
        let init = match opts.warm_start.get(rank) {
            Some(p) if p.dim() == selector.len() => InitParams::Given(p.clone()),
            _ => InitParams::Auto,
        };
        let fit_opts = FitOptions {
            seed: derive_seed(opts.gpr.seed, &[rank as u64]),
            ..opts.gpr.clone()
        };
        experts[comp] = Some(gpr::fit(ts, &init, &fit_opts)?);
        selectors[comp] = selector;
    }
    MoeDistancePredictor::new(gate, experts.into_iter().map(Option::unwrap).collect(), selectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::FeatureScaling;
    use crate::gpr::TrainingSet;

    fn det(x1: f64, x2: f64, y1: f64, y2: f64, t: f64) -> DetectionFeatures {
        DetectionFeatures {
            frame_id: 0,
            x1,
            y1,
            x2,
            y2,
            thickness: t,
            truth: None,
        }
    }

    #[test]
    fn gating_feature_examples() {
        assert_eq!(extract_gating_features(&det(0.0, 10.0, 0.0, 100.0, 4.0)), [0.1, 4.0]);
        assert_eq!(extract_gating_features(&det(5.0, 25.0, 10.0, 30.0, 0.0)), [1.0, 0.0]);
        assert_eq!(extract_gating_features(&det(0.0, 30.0, 0.0, 60.0, 7.0)), [0.5, 7.0]);
    }

    fn toy_expert(selector_len: usize, slope: f64) -> GprModel {
        let xs: Vec<Vec<f64>> = (0..6).map(|i| (0..selector_len).map(|d| (i * (d + 1)) as f64).collect()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| slope * x[0] + 5.0).collect();
        GprModel::with_params(
            TrainingSet::new(xs, ys).unwrap(),
            KernelParams::new(1.0, vec![1.0; selector_len], 0.01).unwrap(),
        )
        .unwrap()
    }

    fn two_expert_predictor() -> MoeDistancePredictor {
        let gate = GmmModel {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.05, 20.0], vec![0.25, 6.0]],
            variances: vec![vec![1e-4, 25.0], vec![1e-3, 4.0]],
            scaling: FeatureScaling {
                mean: vec![0.0, 0.0],
                scale: vec![1.0, 1.0],
            },
        };
        MoeDistancePredictor::new(
            gate,
            vec![toy_expert(5, 0.3), toy_expert(4, 1.1)],
            vec![BB_SEG_FEATURES.to_vec(), BB_FEATURES.to_vec()],
        )
        .unwrap()
    }

    #[test]
    fn routes_and_returns_expert_output_verbatim() {
        let moe = two_expert_predictor();
        let near = det(600.0, 620.0, 0.0, 450.0, 20.0);
        let far = det(600.0, 660.0, 120.0, 400.0, 6.0);
        assert_eq!(moe.route(&near), 0);
        assert_eq!(moe.route(&far), 1);
        let expected_near = moe.experts()[0].predict(&near.select(&BB_SEG_FEATURES)).unwrap();
        let expected_far = moe.experts()[1].predict(&far.select(&BB_FEATURES)).unwrap();
        assert_eq!(moe.predict(&near).unwrap(), expected_near);
        assert_eq!(moe.predict(&far).unwrap(), expected_far);
    }

    #[test]
    fn single_component_equals_plain_gpr() {
        let gate = GmmModel {
            weights: vec![1.0],
            means: vec![vec![0.1, 10.0]],
            variances: vec![vec![1.0, 1.0]],
            scaling: FeatureScaling {
                mean: vec![0.0, 0.0],
                scale: vec![1.0, 1.0],
            },
        };
        let expert = toy_expert(5, 0.7);
        let moe = MoeDistancePredictor::new(gate, vec![expert.clone()], vec![BB_SEG_FEATURES.to_vec()]).unwrap();
        let d = det(3.0, 9.0, 1.0, 14.0, 2.0);
        assert_eq!(moe.predict(&d).unwrap(), expert.predict(&d.select(&BB_SEG_FEATURES)).unwrap());
    }

    #[test]
    fn rejects_inconsistent_parts() {
        let moe = two_expert_predictor();
        let mut sel = moe.selectors().to_vec();
        sel.swap(0, 1);
        assert!(MoeDistancePredictor::new(moe.gate().clone(), moe.experts().to_vec(), sel).is_err());
    }

    #[test]
    fn bundle_roundtrip() {
        let moe = two_expert_predictor();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.json");
        moe.save(&path).unwrap();
        let back = MoeDistancePredictor::load(&path).unwrap();
        let d = det(600.0, 660.0, 120.0, 400.0, 6.0);
        assert_eq!(moe.predict(&d).unwrap(), back.predict(&d).unwrap());
    }

    #[test]
    fn train_requires_truth() {
        let dets = vec![det(0.0, 10.0, 0.0, 100.0, 4.0); 10];
        assert!(matches!(train_moe(&dets, &MoeTrainOptions::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn thin_keeps_evenly_spaced_items() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(thin(&v, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(thin(&v, None), v);
        assert_eq!(thin(&v, Some(20)), v);
    }
}
