use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use odgen_cli::commands::{self, EvalArgs, GenCorpusArgs, PermTestArgs, SampleArgs, TrainArgs, TrainDiffArgs};
use odgen_cli::config::ExperimentConfig;
use odgen_cli::report::{METRICS_SCHEMA, PERM_SCHEMA};
use odgen_model::Result;

/// Origin-destination flow generation.
#[derive(Debug, Parser)]
#[command(name = "odgen", version)]
struct Cli {
    /// Seed applied to the corpus, both training stages and sampling
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config JSON; missing fields take defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchemaName {
    Metrics,
    PermTable,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus or import city directories
    GenCorpus(GenCorpusArgs),
    /// Train the region encoder and flow autoencoder
    TrainVae(TrainArgs),
    /// Train the latent denoiser on a frozen autoencoder
    TrainDiff(TrainDiffArgs),
    /// Generate a flow matrix for one city
    Sample(SampleArgs),
    /// Score predictions or a generator on a corpus split
    Eval(EvalArgs),
    /// Score a generator under progressively stronger reindexing
    PermTest(PermTestArgs),
    /// Print the JSON schema of a report file
    Schema {
        #[arg(value_enum)]
        name: SchemaName,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    match &cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(&cfg, a).map(drop),
        Command::TrainVae(a) => commands::train_vae(&cfg, a).map(drop),
        Command::TrainDiff(a) => commands::train_diff(&cfg, a).map(drop),
        Command::Sample(a) => commands::sample(&cfg, a).map(drop),
        Command::Eval(a) => commands::eval(&cfg, a).map(drop),
        Command::PermTest(a) => commands::perm_test(&cfg, a).map(drop),
        Command::Schema { name } => {
            print!("{}", match name {
                SchemaName::Metrics => METRICS_SCHEMA,
                SchemaName::PermTable => PERM_SCHEMA,
            });
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
