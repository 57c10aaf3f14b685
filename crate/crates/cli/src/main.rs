use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use softnav::experiment::{synth_training_features, train_predictor};
use softnav::perception::{dataset_read, dataset_write};
use softnav::{emit_results, run_ablation, run_experiment, RunConfig, VariantSelection};

/// Landmark-aided vehicle localization experiments.
#[derive(Debug, Parser)]
#[command(name = "softnav", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the gated distance predictor on a labeled detection CSV.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the Monte Carlo filter comparison and write result CSVs.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired feature-set and mixture ablation on synthetic detections.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a labeled synthetic detection CSV.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Overrides {
    /// Base seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    parallel: Option<usize>,
    /// Filters to run: pf, scpf or both.
    #[arg(long, global = true)]
    variant: Option<VariantSelection>,
    /// Disable position fixes after initialization.
    #[arg(long, global = true)]
    no_gps: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.parallel {
            cfg.experiment.parallel = n;
        }
        if let Some(v) = self.variant {
            cfg.experiment.variants = v;
        }
        if self.no_gps {
            cfg.experiment.gps = false;
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train { features, out, config } => {
            let cfg = load_config(config.as_deref(), &cli.overrides)?;
            let dets = dataset_read(features)?;
            info!("training on {} detections from {}", dets.len(), features.display());
            let model = train_predictor(&cfg, &dets)?;
            model.save(out)?;
            info!("wrote predictor bundle {}", out.display());
        }
        Command::Run { config, out } => {
            let cfg = load_config(config.as_deref(), &cli.overrides)?;
            let metrics = run_experiment(&cfg)?;
            emit_results(&metrics, &cfg, out)?;
            for s in &metrics.summaries {
                println!(
                    "sigma_v {:>5.1}  {:<4}  mean {:.3} m  95% CI [{:.3}, {:.3}]",
                    s.sigma_v,
                    s.variant.label(),
                    s.mean,
                    s.ci_lo,
                    s.ci_hi
                );
            }
            info!("wrote results to {}", out.display());
        }
        Command::Ablate { config } => {
            let cfg = load_config(config.as_deref(), &cli.overrides)?;
            print!("{}", run_ablation(&cfg)?.render());
        }
        Command::Synth { config, out } => {
            let cfg = load_config(config.as_deref(), &cli.overrides)?;
            let dets = synth_training_features(&cfg)?;
            dataset_write(out, &dets)?;
            info!("wrote {} detections to {}", dets.len(), out.display());
        }
    }
    Ok(())
}
