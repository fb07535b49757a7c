use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hbshm_cli::{ModelChoice, Pipeline, PipelineConfig};

/// Exit status when a convergence gate fails.
const EXIT_GATE: u8 = 2;

#[derive(Parser)]
#[command(name = "hbshm", version, about = "Hierarchical Bayesian inference of plate deflections from strain data")]
struct Cli {
    /// TOML configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic strain dataset.
    Generate,
    /// Fit the per-plate GP surrogates.
    TrainSurrogate,
    /// Sample a posterior and check convergence.
    Infer {
        #[arg(long, value_enum, default_value_t = ModelArg::Hier)]
        model: ModelArg,
        /// Plate for the independent model; all plates when omitted.
        #[arg(long)]
        plate: Option<usize>,
    },
    /// Posterior predictive detection for pooled vs unpooled models.
    Detect,
    /// Write the consolidated report and plot data.
    Report,
    /// Run every stage in order.
    RunAll,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Hier,
    Indep,
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let pipeline = Pipeline::new(cfg, cli.out)?;
    match cli.command {
        Command::Generate => pipeline.generate()?,
        Command::TrainSurrogate => pipeline.train_surrogates()?,
        Command::Infer { model, plate } => {
            let models = match (model, plate) {
                (ModelArg::Hier, None) => vec![ModelChoice::Hierarchical],
                (ModelArg::Hier, Some(_)) => bail!("--plate only applies to --model indep"),
                (ModelArg::Indep, Some(k)) => vec![ModelChoice::Independent(k)],
                (ModelArg::Indep, None) => (1..=pipeline.cfg.n_plates()).map(ModelChoice::Independent).collect(),
            };
            let mut passed = true;
            for m in models {
                passed &= pipeline.infer(m)?.passed;
            }
            return Ok(passed);
        }
        Command::Detect => {
            pipeline.detect()?;
        }
        Command::Report => {
            pipeline.report()?;
        }
        Command::RunAll => return pipeline.run_all(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: convergence gate failed (rhat >= {})", hbshm::RHAT_THRESHOLD);
            ExitCode::from(EXIT_GATE)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
