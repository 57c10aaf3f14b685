use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[scenario]
duration_steps = 200

[training]
max_per_expert = 50
gpr_restarts = 1
gpr_max_iters = 40

[filter]
particles = 60

[experiment]
sigma_v = [3.0, 10.0]
mc_runs = 2

[ablation]
repetitions = 3
near_samples = 60
pooled_samples = 80
"#;

fn softnav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softnav"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn synth_then_train_writes_dataset_and_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let csv = path(dir.path(), "dets.csv");
    let out = softnav(&["synth", "--config", &cfg, "--out", &csv]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().count() > 20);

    let bundle = path(dir.path(), "model.json");
    let out = softnav(&["train", "--features", &csv, "--out", &bundle, "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(softnav::MoeDistancePredictor::load(&bundle).is_ok());
}

#[test]
fn run_applies_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let results = dir.path().join("results");
    let out = softnav(&[
        "run",
        "--config",
        &cfg,
        "--out",
        &results.to_string_lossy(),
        "--variant",
        "scpf",
        "--seed",
        "9",
        "--parallel",
        "1",
        "--no-gps",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = softnav::RunConfig::load(results.join("manifest.toml")).unwrap();
    assert_eq!(manifest.seed, 9);
    assert!(!manifest.experiment.gps);
    assert_eq!(manifest.experiment.variants, softnav::VariantSelection::Scpf);
    let rows = std::fs::read_to_string(results.join("errors_vs_noise.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("scpf"));
}

#[test]
fn ablate_prints_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = softnav(&["ablate", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("not a target"));
}

#[test]
fn bad_arguments_fail() {
    assert!(!softnav(&["run", "--out", "x", "--variant", "kalman"]).status.success());
    assert!(!softnav(&["run", "--config", "/nonexistent/cfg.toml", "--out", "x"]).status.success());
    assert!(!softnav(&["train", "--out", "x"]).status.success());
}
