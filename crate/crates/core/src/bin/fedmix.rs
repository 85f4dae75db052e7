use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use fedmix::federation::Aggregator;
use fedmix::harness::{compare_aggregators, export_curves, run_experiment, run_grid, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedmix", version, about = "Semi-supervised federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds; replaces `run.seeds`.
    #[arg(long, value_delimiter = ',', required = true)]
    seed: Vec<u64>,
    /// Output directory; replaces `run.out`.
    #[arg(long)]
    out: PathBuf,
    /// Replaces `federation.rounds`.
    #[arg(long)]
    rounds: Option<usize>,
    /// Replaces `partition.mu`.
    #[arg(long)]
    mu: Option<f64>,
    /// Replaces `federation.aggregator`.
    #[arg(long)]
    aggregator: Option<Aggregator>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.run.seeds = self.seed.clone();
        cfg.run.out = self.out.clone();
        if let Some(r) = self.rounds {
            cfg.federation.rounds = r;
        }
        if let Some(mu) = self.mu {
            cfg.partition.mu = mu;
        }
        if let Some(a) = self.aggregator {
            cfg.federation.aggregator = a;
        }
        cfg.validate().context("invalid configuration after applying flags")?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment for each seed.
    Run(Common),
    /// Run every cell of the config's `[grid]` for each seed.
    Grid(Common),
    /// Compare aggregators on identical data and seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated aggregator names (at least two).
        #[arg(long = "with", value_delimiter = ',', default_values_t = [
            Aggregator::FedMixFedFreq,
            Aggregator::NaiveDecomposition,
            Aggregator::FedAvgSupervisedOnly,
        ])]
        with: Vec<Aggregator>,
    },
    /// Collect every metrics.csv under a directory into one long CSV.
    Export {
        dir: PathBuf,
        /// Destination file; defaults to `<dir>/curves.csv`.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.load()?;
            for o in run_experiment(&cfg, &cfg.run.out)? {
                let s = &o.summary;
                println!(
                    "seed {}: final {:.4} best {:.4} (round {})",
                    s.seed, s.final_accuracy, s.best_accuracy, s.best_round
                );
            }
        }
        Command::Grid(common) => {
            let cfg = common.load()?;
            for cell in run_grid(&cfg, &cfg.run.out)? {
                println!("{}: final {:.4} ± {:.4}", cell.name, cell.final_mean, cell.final_std);
            }
        }
        Command::Compare { common, with } => {
            let cfg = common.load()?;
            let table = compare_aggregators(&cfg, &with, &cfg.run.out)?;
            print!("{}", table.to_text());
        }
        Command::Export { dir, dest } => {
            let path = export_curves(&dir, dest.as_deref())?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
