use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gaslift_twin::config::{ConfigError, RunConfig, CONFIG_ENV};
use gaslift_twin::pipeline::{Pipeline, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "gaslift", version, about = "Gas-lift digital twin workbench")]
struct Cli {
    /// Configuration file; desk defaults when absent.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment plan on the plant and store the corpus.
    GenData,
    /// Rank exogenous inputs by orthogonal least squares.
    RankInputs,
    /// Pick NARX lag orders from Lipschitz quotients.
    SelectStructure,
    /// Search network hyperparameters with Hyperband.
    Tune,
    /// Train the MAP network of each channel.
    Fit,
    /// Sample the weight posterior of each channel.
    Mcmc,
    /// Shrink the ensembles and assemble the offline twin.
    Reduce,
    /// Evaluate offline coverage on held-out segments.
    Report,
    /// Replay drift scenarios against the live twin.
    Sil {
        /// Scenario ids; the configured list when omitted.
        #[arg(long = "scenario")]
        scenarios: Vec<usize>,
    },
    /// Run every stage in order.
    Run,
    /// Print the resolved configuration and its hash.
    ShowConfig,
}

enum Failure {
    Config(ConfigError),
    Pipeline(PipelineError),
}

impl Failure {
    fn json(&self) -> serde_json::Value {
        let (kind, message) = match self {
            Failure::Config(e) => ("ConfigError", e.to_string()),
            Failure::Pipeline(e) => (e.kind(), e.to_string()),
        };
        serde_json::json!({ "error": kind, "message": message })
    }
}

fn execute(cli: Cli) -> Result<serde_json::Value, Failure> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(Failure::Config)?,
        None => RunConfig::desk(),
    };
    let stage = match cli.command {
        Command::GenData => Stage::GenData,
        Command::RankInputs => Stage::RankInputs,
        Command::SelectStructure => Stage::SelectStructure,
        Command::Tune => Stage::Tune,
        Command::Fit => Stage::Fit,
        Command::Mcmc => Stage::Mcmc,
        Command::Reduce => Stage::Reduce,
        Command::Report => Stage::Report,
        Command::Sil { scenarios } if !scenarios.is_empty() => {
            let manifest = Pipeline::new(config)
                .sil_with(&scenarios, |_, _| {})
                .map_err(Failure::Pipeline)?;
            return Ok(serde_json::json!({ "stage": manifest.stage, "outputs": manifest.outputs }));
        }
        Command::Sil { .. } => Stage::Sil,
        Command::Run => {
            let manifests = Pipeline::new(config).run_all().map_err(Failure::Pipeline)?;
            return Ok(serde_json::json!({ "stages": manifests.iter().map(|m| &m.stage).collect::<Vec<_>>() }));
        }
        Command::ShowConfig => {
            return Ok(serde_json::json!({ "hash": config.hash(), "config": config.render() }));
        }
    };
    let manifest = Pipeline::new(config).run(stage).map_err(Failure::Pipeline)?;
    Ok(serde_json::json!({ "stage": manifest.stage, "outputs": manifest.outputs }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.json());
            ExitCode::FAILURE
        }
    }
}
