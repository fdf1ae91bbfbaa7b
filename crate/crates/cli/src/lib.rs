//! Config-driven experiment runner for `vpflow`.

pub mod config;
pub mod csvio;
pub mod error;
pub mod experiments;

use config::{Experiment, ExperimentConfig};
use error::CliError;
use experiments::RunContext;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Command-line overrides of config values.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifest: Value,
}

/// Loads, validates and runs one experiment, then writes `manifest.json`.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let (cfg, text) = ExperimentConfig::load(config_path)?;
    cfg.validate()?;
    let seed = opts.seed.unwrap_or(cfg.seed);
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("vpflow-out").join(cfg.experiment.name()));
    let mut ctx = RunContext::new(out.clone(), seed)?;
    let started = Instant::now();
    match cfg.experiment {
        Experiment::ScoreBounds => experiments::score_bounds(&cfg, &mut ctx)?,
        Experiment::Transport => experiments::transport(&cfg, &mut ctx)?,
        Experiment::Converge => experiments::converge(&cfg, &mut ctx)?,
        Experiment::TrainScore => experiments::train_score(&cfg, &mut ctx)?,
        Experiment::TrainIresnet => experiments::train_iresnet(&cfg, &mut ctx)?,
        Experiment::Compare => experiments::compare(&cfg, &mut ctx)?,
        Experiment::GirsanovCheck => experiments::girsanov_check(&cfg, &mut ctx)?,
    }
    let manifest = json!({
        "status": "ok",
        "experiment": cfg.experiment.name(),
        "config_path": config_path.display().to_string(),
        "config_sha256": format!("{:x}", Sha256::digest(text.as_bytes())),
        "seed": seed,
        "seed_overridden": opts.seed.is_some(),
        "threads": rayon::current_num_threads(),
        "versions": {
            "vpflow": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": vpflow::nn::CHECKPOINT_VERSION,
        },
        "wall_time_s": started.elapsed().as_secs_f64(),
        "outputs": ctx.outputs,
    });
    ctx.write_json("manifest.json", &manifest)?;
    Ok(RunSummary { out_dir: out, manifest })
}
