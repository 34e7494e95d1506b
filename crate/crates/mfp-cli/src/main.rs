//! `mfp` - memory-failure prediction pipeline over DRAM CE logs.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing upstream
//! artifact, 4 data error.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::{Overrides, PipelineConfig};
use mfp_core::Error;

#[derive(Parser)]
#[command(
    name = "mfp",
    version,
    about = "Memory-failure prediction over DRAM correctable-error logs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline config file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Master seed for generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Minimum lead time in seconds.
    #[arg(long, global = true)]
    lead: Option<i64>,

    /// Prediction validity window in seconds.
    #[arg(long, global = true)]
    valid: Option<i64>,

    /// Train/test split timestamp (epoch seconds).
    #[arg(long, global = true)]
    split: Option<i64>,

    /// End of the data horizon (epoch seconds).
    #[arg(long, global = true)]
    data_end: Option<i64>,

    /// Synthetic corpus size.
    #[arg(long, global = true)]
    n_dimms: Option<usize>,

    /// Fraction of synthetic DIMMs planted with faults.
    #[arg(long, global = true)]
    fault_fraction: Option<f64>,

    /// Synthetic horizon length in days.
    #[arg(long, global = true)]
    horizon_days: Option<f64>,

    /// Boosting rounds for the time-patch classifier.
    #[arg(long, global = true)]
    n_trees: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic CE corpus with planted faults and ground truth.
    GenSynth,
    /// Parse, validate and normalize the configured CE logs.
    Ingest,
    /// Build labeled time-patch samples over the full horizon.
    Featurize,
    /// Train the time-patch classifier and select its threshold by
    /// 5-fold cross-validation.
    TrainPatch,
    /// Train the DIMM-centric tree, extract the rule base, fit the naive
    /// pattern table.
    TrainPoint,
    /// Replay the test period and write one prediction log per method.
    Predict,
    /// Score all prediction logs against the failure records.
    Evaluate,
    /// Re-evaluate across the lead-time grid.
    SweepLead,
    /// Render metric, importance and rule tables.
    Report,
    /// Write a default pipeline config to the given path.
    InitConfig {
        #[arg(default_value = "pipeline.toml")]
        path: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth => "gen-synth",
            Command::Ingest => "ingest",
            Command::Featurize => "featurize",
            Command::TrainPatch => "train-patch",
            Command::TrainPoint => "train-point",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::SweepLead => "sweep-lead",
            Command::Report => "report",
            Command::InitConfig { .. } => "init-config",
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let mut cfg = PipelineConfig::default();
            // Without a config file, inputs live in the output directory.
            let base = cli.out_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
            cfg.out_dir = base.clone();
            cfg.resolve_paths(&base);
            cfg.out_dir = base;
            cfg
        }
    };
    cfg.apply_overrides(&Overrides {
        out_dir: cli.out_dir.clone(),
        seed: cli.seed,
        lead_s: cli.lead,
        valid_s: cli.valid,
        split_time: cli.split,
        data_end: cli.data_end,
        n_dimms: cli.n_dimms,
        fault_fraction: cli.fault_fraction,
        horizon_days: cli.horizon_days,
        n_trees: cli.n_trees,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Command::InitConfig { path } = &cli.command {
        stages::write_default_config(path)?;
        stages::stage_log("init-config", &format!("wrote {}", path.display()));
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let stage = cli.command.name();
    let started = Instant::now();
    stages::stage_log(stage, "start");
    match cli.command {
        Command::GenSynth => stages::gen_synth(&cfg)?,
        Command::Ingest => stages::ingest(&cfg)?,
        Command::Featurize => stages::featurize(&cfg)?,
        Command::TrainPatch => stages::train_patch(&cfg)?,
        Command::TrainPoint => stages::train_point(&cfg)?,
        Command::Predict => stages::predict(&cfg)?,
        Command::Evaluate => stages::evaluate_stage(&cfg)?,
        Command::SweepLead => stages::sweep_lead(&cfg)?,
        Command::Report => stages::report(&cfg)?,
        Command::InitConfig { .. } => unreachable!("handled above"),
    }
    stages::stage_log(stage, &format!("done in {:.2?}", started.elapsed()));
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::SchemaMismatch { .. } => 2,
        Error::MissingDependency { .. } => 3,
        Error::Io(_) | Error::Data(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            stages::stage_log(cli.command.name(), &format!("error: {err}"));
            ExitCode::from(exit_code_for(&err))
        }
    }
}
