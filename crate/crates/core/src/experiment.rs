//! Monte Carlo evaluation of the plain and constrained filters on the
//! synthetic course, the regression ablation, and CSV output.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Perturbation, RunConfig, Variant};
use crate::constraints::build_frame_constraints;
use crate::error::{Error, Result};
use crate::filter::{gps_measurements, run_filter, FilterConfig, Unconstrained, FilterRun, ObservationModel, StepDiagnostics};
use crate::gmm::GmmOptions;
use crate::gpr::{self, FitOptions, GprModel, InitParams, Prediction};
use crate::moe::{extract_gating_features, train_moe, MoeDistancePredictor, MoeTrainOptions};
use crate::perception::{
    build_training_set, match_landmarks, DetectionEvent, synth_detections, DetectionFeatures, Feature, BB_FEATURES, BB_SEG_FEATURES,
};
use crate::scenario::{build_ring_scenario, drive_track, Scenario, ScenarioConfig};
use crate::seeds::{derive_seed, unit_hash};
use crate::state::VehicleState;

/// Tags separating the random streams derived from the run seed.
mod stream {
    pub const SCENARIO: u64 = 1;
    pub const TRAINING_DRIVE: u64 = 2;
    pub const TEST_DETECTIONS: u64 = 3;
    pub const GPS: u64 = 4;
    pub const FILTER: u64 = 5;
    pub const PERTURBATION: u64 = 6;
    pub const ABLATION_DRIVE: u64 = 7;
    pub const ABLATION_SPLIT: u64 = 8;
    pub const GATE: u64 = 9;
    pub const EXPERTS: u64 = 10;
}

/// Detections of one frame paired with their predicted distances.
pub type FramePredictions = Vec<(DetectionFeatures, Prediction)>;

pub fn build_scenario(cfg: &RunConfig) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream::SCENARIO]));
    build_ring_scenario(&cfg.scenario, &mut rng)
}

/// Labeled detections from a weaving drive on the scenario's course, every
/// `stride`-th frame. `tag` selects an independent drive and noise stream.
fn collection_drive(cfg: &RunConfig, scenario: &Scenario, tag: u64, stride: usize) -> Result<Vec<DetectionFeatures>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag]));
    let drive_cfg = ScenarioConfig {
        lateral_wander: cfg.training.lateral_wander,
        start_offset: cfg.training.start_fraction * scenario.course.length(),
        ..cfg.scenario.clone()
    };
    let phase = rand::Rng::random::<f64>(&mut rng) * std::f64::consts::TAU;
    let track = drive_track(&scenario.course, &drive_cfg, phase);
    let mut dets = Vec::new();
    for (k, (s, h)) in track.states.iter().zip(&track.headings).enumerate() {
        let frame = synth_detections(&cfg.camera, s, *h, &scenario.map.landmarks, &cfg.perception, k as u64, &mut rng)?;
        if k % stride == 0 {
            dets.extend(frame);
        }
    }
    Ok(dets)
}

/// Labeled detections used to train the distance predictor.
pub fn training_detections(cfg: &RunConfig, scenario: &Scenario) -> Result<Vec<DetectionFeatures>> {
    collection_drive(cfg, scenario, stream::TRAINING_DRIVE, cfg.training.frame_stride)
}

fn train_options(cfg: &RunConfig) -> MoeTrainOptions {
    let t = &cfg.training;
    MoeTrainOptions {
        components: t.components,
        gmm: GmmOptions {
            restarts: t.gmm_restarts,
            seed: derive_seed(cfg.seed, &[stream::GATE]),
            ..Default::default()
        },
        gpr: FitOptions {
            restarts: t.gpr_restarts,
            max_iters: t.gpr_max_iters,
            seed: derive_seed(cfg.seed, &[stream::EXPERTS]),
            ..Default::default()
        },
        max_per_expert: t.max_per_expert,
        ..Default::default()
    }
}

/// Trains the gated distance predictor on `dets`.
pub fn train_predictor(cfg: &RunConfig, dets: &[DetectionFeatures]) -> Result<MoeDistancePredictor> {
    train_moe(dets, &train_options(cfg))
}

/// Loads `training.bundle` if configured, otherwise trains on a fresh
/// collection drive.
pub fn load_or_train_predictor(cfg: &RunConfig, scenario: &Scenario) -> Result<MoeDistancePredictor> {
    match &cfg.training.bundle {
        Some(path) => MoeDistancePredictor::load(path),
        None => train_predictor(cfg, &training_detections(cfg, scenario)?),
    }
}

/// Detections along the evaluation track with their predicted distances.
///
/// Computed once per experiment; every Monte Carlo run sees the same frames.
pub fn predict_frames(
    cfg: &RunConfig,
    scenario: &Scenario,
    predictor: &MoeDistancePredictor,
) -> Result<Vec<FramePredictions>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream::TEST_DETECTIONS]));
    let track = &scenario.track;
    let mut frames = Vec::with_capacity(track.len());
    for (k, (s, h)) in track.states.iter().zip(&track.headings).enumerate() {
        let dets = synth_detections(&cfg.camera, s, *h, &scenario.map.landmarks, &cfg.perception, k as u64, &mut rng)?;
        let frame = dets
            .into_iter()
            .map(|d| Ok((d, predictor.predict(&d)?)))
            .collect::<Result<Vec<_>>>()?;
        frames.push(frame);
    }
    Ok(frames)
}

fn perturb(frames: &[FramePredictions], perturbation: Option<Perturbation>, seed: u64) -> Vec<FramePredictions> {
    let Some(p) = perturbation else {
        return frames.to_vec();
    };
    let selected = |k: usize, j: usize, fraction: f64| unit_hash(seed, &[stream::PERTURBATION, k as u64, j as u64]) < fraction;
    frames
        .iter()
        .enumerate()
        .map(|(k, frame)| {
            frame
                .iter()
                .enumerate()
                .filter_map(|(j, (d, pred))| match p {
                    Perturbation::Drop { fraction } if selected(k, j, fraction) => None,
                    Perturbation::InflateVariance { fraction, factor } if selected(k, j, fraction) => Some((
                        *d,
                        Prediction {
                            mean: pred.mean,
                            variance: pred.variance * factor,
                            variance_with_noise: pred.variance_with_noise * factor,
                        },
                    )),
                    _ => Some((*d, *pred)),
                })
                .collect()
        })
        .collect()
}

/// Outcome of one filtered trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub sigma_v: f64,
    pub variant: Variant,
    pub run: usize,
    pub mean_error: f64,
    pub resets: usize,
    pub matches: usize,
    pub correct_matches: usize,
}

/// Aggregate over the Monte Carlo runs of one (noise level, variant) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub sigma_v: f64,
    pub variant: Variant,
    pub runs: usize,
    pub mean: f64,
    pub median: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub resets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerStepSeries {
    pub sigma_v: f64,
    pub variant: Variant,
    /// Error at each step averaged over runs.
    pub mean_error: Vec<f64>,
    /// Diagnostics of run 0.
    pub first_run: Vec<StepDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub summaries: Vec<CellSummary>,
    pub runs: Vec<RunRecord>,
    pub per_step: Vec<PerStepSeries>,
    /// `detection_hist[n]` = frames with `n` detections.
    pub detection_hist: Vec<u64>,
}

impl RunMetrics {
    pub fn summary(&self, sigma_v: f64, variant: Variant) -> Option<&CellSummary> {
        self.summaries.iter().find(|s| s.sigma_v == sigma_v && s.variant == variant)
    }

    /// Fraction of landmark matches that picked the landmark actually seen.
    pub fn match_accuracy(&self) -> f64 {
        let (m, c) = self.runs.iter().fold((0, 0), |(m, c), r| (m + r.matches, c + r.correct_matches));
        if m == 0 { 1.0 } else { c as f64 / m as f64 }
    }
}

/// Mean, median and normal-approximation 95% interval of `values`.
pub fn summarize(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let half = 1.96 * var.sqrt() / n.sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    (mean, median, mean - half, mean + half)
}

/// A prepared experiment: scenario, predictor and per-frame predictions.
pub struct Experiment {
    pub config: RunConfig,
    pub scenario: Scenario,
    pub predictor: MoeDistancePredictor,
    pub frames: Vec<FramePredictions>,
}

impl Experiment {
    /// Builds the scenario and frame predictions; trains (or loads) the
    /// predictor unless one is supplied.
    pub fn prepare(config: RunConfig, predictor: Option<MoeDistancePredictor>) -> Result<Self> {
        config.validate()?;
        let scenario = build_scenario(&config)?;
        let predictor = match predictor {
            Some(p) => p,
            None => load_or_train_predictor(&config, &scenario)?,
        };
        let frames = predict_frames(&config, &scenario, &predictor)?;
        Ok(Self {
            config,
            scenario,
            predictor,
            frames,
        })
    }

    pub fn detection_histogram(&self) -> Vec<u64> {
        let max = self.frames.iter().map(Vec::len).max().unwrap_or(0);
        let mut hist = vec![0u64; max + 1];
        for f in &self.frames {
            hist[f.len()] += 1;
        }
        hist
    }

    fn filter_config(&self, variant: Variant) -> FilterConfig {
        let f = &self.config.filter;
        FilterConfig {
            particles: f.particles,
            dt: self.config.scenario.dt,
            q: match variant {
                Variant::Pf => f.q_pf,
                Variant::Scpf => f.q_scpf,
            },
            p0_diag: f.p0_diag,
            resample_threshold: f.resample_threshold,
        }
    }

    /// One filtered trajectory. Position-fix noise depends only on
    /// (noise level, run), so both variants see the same fixes.
    pub fn run_single(
        &self,
        frames: &[FramePredictions],
        sigma_index: usize,
        variant: Variant,
        run: usize,
    ) -> Result<(FilterRun, usize, usize)> {
        let cfg = &self.config;
        let exp = &cfg.experiment;
        let sigma_v = exp.sigma_v[sigma_index];
        let track = &self.scenario.track;
        let measurements = if exp.gps {
            let mut gps_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream::GPS, sigma_index as u64, run as u64]));
            gps_measurements(track, sigma_v, exp.gps_dropout, &mut gps_rng)
        } else {
            vec![None; track.len()]
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[stream::FILTER, sigma_index as u64, variant.index(), run as u64],
        ));
        let observation = ObservationModel::new(sigma_v)?;
        let filter_cfg = self.filter_config(variant);
        let x0 = track.states[0];
        let (mut matches, mut correct) = (0usize, 0usize);
        let result = match variant {
            Variant::Pf => run_filter(track, &measurements, &x0, &filter_cfg, &observation, &mut Unconstrained, &mut rng)?,
            Variant::Scpf => {
                let map = &self.scenario.map;
                let mut source = |k: usize, last: &VehicleState| {
                    let event = if exp.landmark_constraints {
                        match_landmarks(k as u64, &frames[k], &map.landmarks, last, &cfg.matching)
                    } else {
                        Default::default()
                    };
                    matches += event.matches.len();
                    correct += count_correct(&event, &frames[k]);
                    build_frame_constraints(&map.road, &map.landmarks, &event, last, &cfg.constraints)
                };
                run_filter(track, &measurements, &x0, &filter_cfg, &observation, &mut source, &mut rng)?
            }
        };
        Ok((result, matches, correct))
    }

    /// Runs every (noise level, variant, run) cell of the configured grid.
    pub fn run(&self) -> Result<RunMetrics> {
        let cfg = &self.config;
        let exp = &cfg.experiment;
        let frames = perturb(&self.frames, exp.perturbation, cfg.seed);
        let variants = exp.variants.variants();
        let jobs: Vec<(usize, Variant, usize)> = (0..exp.sigma_v.len())
            .flat_map(|i| variants.iter().flat_map(move |&v| (0..exp.mc_runs).map(move |r| (i, v, r))))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(exp.parallel)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        let outcomes: Vec<Result<(FilterRun, usize, usize)>> =
            pool.install(|| jobs.par_iter().map(|&(i, v, r)| self.run_single(&frames, i, v, r)).collect());

        let mut metrics = RunMetrics {
            detection_hist: self.detection_histogram(),
            ..Default::default()
        };
        let steps = self.scenario.track.len();
        let mut cell_start = 0;
        for (i, &sigma_v) in exp.sigma_v.iter().enumerate() {
            for &variant in variants {
                let mut means = Vec::with_capacity(exp.mc_runs);
                let mut per_step = vec![0.0; steps];
                let mut first_run = Vec::new();
                let mut resets = 0;
                for r in 0..exp.mc_runs {
                    let (run, matches, correct) = match &outcomes[cell_start + r] {
                        Ok(o) => o,
                        Err(e) => return Err(Error::Fit(format!("run {r} at sigma_v {sigma_v} ({}) failed: {e}", variant.label()))),
                    };
                    let mean_error = run.mean_error();
                    means.push(mean_error);
                    resets += run.resets;
                    for (acc, e) in per_step.iter_mut().zip(&run.errors) {
                        *acc += e / exp.mc_runs as f64;
                    }
                    if r == 0 {
                        first_run = run.diagnostics.clone();
                    }
                    metrics.runs.push(RunRecord {
                        sigma_v,
                        variant,
                        run: r,
                        mean_error,
                        resets: run.resets,
                        matches: *matches,
                        correct_matches: *correct,
                    });
                }
                debug_assert_eq!(jobs[cell_start], (i, variant, 0));
                cell_start += exp.mc_runs;
                let (mean, median, ci_lo, ci_hi) = summarize(&means);
                log::info!("sigma_v {sigma_v:>5.1} {:<4} mean {mean:.3} m  95% CI [{ci_lo:.3}, {ci_hi:.3}]", variant.label());
                metrics.summaries.push(CellSummary {
                    sigma_v,
                    variant,
                    runs: exp.mc_runs,
                    mean,
                    median,
                    ci_lo,
                    ci_hi,
                    resets,
                });
                metrics.per_step.push(PerStepSeries {
                    sigma_v,
                    variant,
                    mean_error: per_step,
                    first_run,
                });
            }
        }
        Ok(metrics)
    }
}

fn count_correct(event: &DetectionEvent, frame: &FramePredictions) -> usize {
    event
        .matches
        .iter()
        .filter(|m| frame[m.detection].0.truth.is_some_and(|t| t.landmark_id == m.landmark_id))
        .count()
}

/// Builds, trains and runs the configured experiment.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunMetrics> {
    Experiment::prepare(cfg.clone(), None)?.run()
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

/// Writes the result tables and the manifest that reproduces them.
///
/// Files: `errors_vs_noise.csv`, `run_means.csv`, `per_step_error.csv`,
/// `detections_hist.csv`, `manifest.toml`, and with diagnostics enabled one
/// `diagnostics_<variant>_<sigma>.csv` per cell.
pub fn emit_results(metrics: &RunMetrics, cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(dir, "manifest.toml", &cfg.to_toml()?)?;

    let mut s = String::from("sigma_v,variant,mean,ci_lo,ci_hi\n");
    for c in &metrics.summaries {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", c.sigma_v, c.variant.label(), c.mean, c.ci_lo, c.ci_hi);
    }
    write_file(dir, "errors_vs_noise.csv", &s)?;

    let mut s = String::from("sigma_v,variant,run,mean_error_m,resets,matches,correct_matches\n");
    for r in &metrics.runs {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{},{},{}",
            r.sigma_v,
            r.variant.label(),
            r.run,
            r.mean_error,
            r.resets,
            r.matches,
            r.correct_matches
        );
    }
    write_file(dir, "run_means.csv", &s)?;

    let mut s = String::from("step,sigma_v,variant,mean_error_m\n");
    for series in &metrics.per_step {
        for (k, e) in series.mean_error.iter().enumerate() {
            let _ = writeln!(s, "{k},{},{},{e:.6}", series.sigma_v, series.variant.label());
        }
    }
    write_file(dir, "per_step_error.csv", &s)?;

    let mut s = String::from("n_detections,frames\n");
    for (n, c) in metrics.detection_hist.iter().enumerate() {
        let _ = writeln!(s, "{n},{c}");
    }
    write_file(dir, "detections_hist.csv", &s)?;

    if cfg.experiment.diagnostics {
        for series in &metrics.per_step {
            let mut s = String::from("step,error_m,ess,n_constraints,reset_flag\n");
            for (k, d) in series.first_run.iter().enumerate() {
                let _ = writeln!(s, "{k},{:.6},{:.3},{},{}", d.error_m, d.ess, d.n_constraints, u8::from(d.reset));
            }
            write_file(dir, &format!("diagnostics_{}_{}.csv", series.variant.label(), series.sigma_v), &s)?;
        }
    }
    Ok(())
}

/// Paired holdout comparison of two regressors over repeated splits.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedComparison {
    pub baseline: &'static str,
    pub candidate: &'static str,
    pub baseline_mae: Vec<f64>,
    pub candidate_mae: Vec<f64>,
}

impl PairedComparison {
    /// Repetitions where the candidate's MAE is strictly lower.
    pub fn candidate_wins(&self) -> usize {
        self.baseline_mae.iter().zip(&self.candidate_mae).filter(|(b, c)| c < b).count()
    }

    /// Mean and standard deviation of `baseline - candidate`.
    pub fn paired_difference(&self) -> (f64, f64) {
        let d: Vec<f64> = self.baseline_mae.iter().zip(&self.candidate_mae).map(|(b, c)| b - c).collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        (mean, sd)
    }

    pub fn mean_mae(&self) -> (f64, f64) {
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (m(&self.baseline_mae), m(&self.candidate_mae))
    }
}

/// Holdout MAE values reported for real-world light-pole data (train, validation).
pub const REFERENCE_MAE_NEAR: (f64, f64) = (0.36, 0.65);
pub const REFERENCE_MAE_FAR: (f64, f64) = (0.74, 0.98);

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    /// Box-only versus box plus thickness, near cluster.
    pub features: PairedComparison,
    /// Single regressor versus gated mixture, all detections.
    pub mixture: PairedComparison,
    pub near_samples: usize,
    pub pooled_samples: usize,
}

impl AblationReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in [&self.features, &self.mixture] {
            let (mb, mc) = c.mean_mae();
            let (dm, ds) = c.paired_difference();
            let _ = writeln!(
                s,
                "{} vs {}: {} wins {}/{}  mean MAE {:.3} m vs {:.3} m  paired diff {:.3} +/- {:.3} m",
                c.candidate,
                c.baseline,
                c.candidate,
                c.candidate_wins(),
                c.baseline_mae.len(),
                mc,
                mb,
                dm,
                ds
            );
        }
        let _ = writeln!(
            s,
            "published reference MAE on real camera data (context only, not a target): near {:.2}/{:.2} m, far {:.2}/{:.2} m (train/validation)",
            REFERENCE_MAE_NEAR.0, REFERENCE_MAE_NEAR.1, REFERENCE_MAE_FAR.0, REFERENCE_MAE_FAR.1
        );
        s
    }
}

fn mae(model_predict: impl Fn(&DetectionFeatures) -> Result<f64>, test: &[DetectionFeatures]) -> Result<f64> {
    let mut total = 0.0;
    for d in test {
        let truth = d.truth.expect("ablation data is labeled").true_distance;
        total += (model_predict(d)? - truth).abs();
    }
    Ok(total / test.len() as f64)
}

fn fit_selector(train: &[DetectionFeatures], selector: &[Feature], init: &InitParams, opts: &FitOptions) -> Result<GprModel> {
    gpr::fit(build_training_set(train, selector)?, init, opts)
}

fn predict_with(model: &GprModel, selector: &[Feature], d: &DetectionFeatures) -> Result<f64> {
    Ok(model.predict(&d.select(selector))?.mean)
}

/// Repeated 80/20 holdout comparisons on labeled synthetic detections.
///
/// A pilot fit on each full sample sets the hyperparameters every
/// repetition starts from; both models of a pair always share the split.
pub fn run_ablation(cfg: &RunConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let a = &cfg.ablation;
    let scenario = build_scenario(cfg)?;
    let all = collection_drive(cfg, &scenario, stream::ABLATION_DRIVE, a.frame_stride)?;
    let mut pick_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream::ABLATION_SPLIT]));

    let train_opts = train_options(cfg);
    let gating: Vec<Vec<f64>> = all.iter().map(|d| extract_gating_features(d).to_vec()).collect();
    let gate = crate::gmm::gmm_fit(&gating, train_opts.components, &train_opts.gmm)?;
    let k = gate.n_components();
    let mut clusters: Vec<Vec<DetectionFeatures>> = vec![Vec::new(); k];
    for (d, g) in all.iter().zip(&gating) {
        clusters[gate.assign(g)].push(*d);
    }
    let near = clusters
        .iter()
        .filter(|c| !c.is_empty())
        .min_by(|x, y| mean_truth(x).total_cmp(&mean_truth(y)))
        .ok_or_else(|| Error::Fit("ablation drive produced no detections".into()))?;

    let mut near: Vec<DetectionFeatures> = near.clone();
    near.shuffle(&mut pick_rng);
    near.truncate(a.near_samples);
    let mut pooled = all.clone();
    pooled.shuffle(&mut pick_rng);
    pooled.truncate(a.pooled_samples);

    let pilot_opts = FitOptions {
        seed: derive_seed(cfg.seed, &[stream::EXPERTS, 100]),
        ..train_opts.gpr.clone()
    };
    let pilot_bb = fit_selector(&near, &BB_FEATURES, &InitParams::Auto, &pilot_opts)?.params().clone();
    let pilot_seg = fit_selector(&near, &BB_SEG_FEATURES, &InitParams::Auto, &pilot_opts)?.params().clone();
    let pilot_single = fit_selector(&pooled, &a.single_selector, &InitParams::Auto, &pilot_opts)?.params().clone();
    let pilot_moe = train_moe(&pooled, &train_opts)?;
    let mut ranked: Vec<usize> = (0..pilot_moe.experts().len()).collect();
    let moe_mean = |c: usize| -> f64 {
        let ts = pilot_moe.experts()[c].training();
        ts.targets().iter().sum::<f64>() / ts.len() as f64
    };
    ranked.sort_by(|&x, &y| moe_mean(x).total_cmp(&moe_mean(y)));
    let warm_start = ranked.iter().map(|&c| pilot_moe.experts()[c].params().clone()).collect();

    let rep_opts = FitOptions {
        restarts: 1,
        max_iters: a.gpr_max_iters,
        ..pilot_opts
    };
    let rep_moe_opts = MoeTrainOptions {
        gpr: rep_opts.clone(),
        warm_start,
        ..train_opts
    };

    let reps: Vec<Result<[f64; 4]>> = (0..a.repetitions)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream::ABLATION_SPLIT, rep as u64]));
            let (near_train, near_test) = split(&near, a.train_fraction, &mut rng);
            let bb = fit_selector(&near_train, &BB_FEATURES, &InitParams::Given(pilot_bb.clone()), &rep_opts)?;
            let seg = fit_selector(&near_train, &BB_SEG_FEATURES, &InitParams::Given(pilot_seg.clone()), &rep_opts)?;
            let mae_bb = mae(|d| predict_with(&bb, &BB_FEATURES, d), &near_test)?;
            let mae_seg = mae(|d| predict_with(&seg, &BB_SEG_FEATURES, d), &near_test)?;

            let (pool_train, pool_test) = split(&pooled, a.train_fraction, &mut rng);
            let single = fit_selector(&pool_train, &a.single_selector, &InitParams::Given(pilot_single.clone()), &rep_opts)?;
            let moe = train_moe(&pool_train, &rep_moe_opts)?;
            let mae_single = mae(|d| predict_with(&single, &a.single_selector, d), &pool_test)?;
            let mae_moe = mae(|d| Ok(moe.predict(d)?.mean), &pool_test)?;
            Ok([mae_bb, mae_seg, mae_single, mae_moe])
        })
        .collect();
    let reps = reps.into_iter().collect::<Result<Vec<_>>>()?;

    Ok(AblationReport {
        features: PairedComparison {
            baseline: "BB",
            candidate: "BB+SEG",
            baseline_mae: reps.iter().map(|r| r[0]).collect(),
            candidate_mae: reps.iter().map(|r| r[1]).collect(),
        },
        mixture: PairedComparison {
            baseline: "single",
            candidate: "ME",
            baseline_mae: reps.iter().map(|r| r[2]).collect(),
            candidate_mae: reps.iter().map(|r| r[3]).collect(),
        },
        near_samples: near.len(),
        pooled_samples: pooled.len(),
    })
}

fn mean_truth(c: &[DetectionFeatures]) -> f64 {
    c.iter().map(|d| d.truth.map_or(0.0, |t| t.true_distance)).sum::<f64>() / c.len() as f64
}

fn split(data: &[DetectionFeatures], train_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<DetectionFeatures>, Vec<DetectionFeatures>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let n_train = ((data.len() as f64) * train_fraction).round() as usize;
    let train = idx[..n_train].iter().map(|&i| data[i]).collect();
    let test = idx[n_train..].iter().map(|&i| data[i]).collect();
    (train, test)
}

/// Labeled training detections for the configured scenario.
pub fn synth_training_features(cfg: &RunConfig) -> Result<Vec<DetectionFeatures>> {
    training_detections(cfg, &build_scenario(cfg)?)
}
