use std::io;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use unishuffle_cli::config::ModeName;
use unishuffle_cli::{commands, ExperimentConfig, Overrides};

/// Federated learning with unary-encoded, shuffled updates.
#[derive(Parser)]
#[command(name = "unishuffle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a federated model and write metrics and transcripts.
    Run(ConfigArgs),
    /// Run source inference against one or more finished runs.
    Attack {
        /// Run directories; all must share data and partition settings.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write the table; defaults to the first run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Round to attack instead of the configured one.
        #[arg(long)]
        round: Option<usize>,
    },
    /// Print the per-client, per-round communication cost.
    Budget {
        #[command(flatten)]
        config: ConfigArgs,
        /// Model size to use instead of the configured model.
        #[arg(long)]
        params: Option<u64>,
    },
    /// Merge per-round losses of several runs into one CSV.
    LossCurve {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show how the training data is split among clients.
    PartitionStats(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<ModeName>,
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Leading training examples to keep; 0 keeps all.
    #[arg(long)]
    subset: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let overrides = Overrides {
            out: self.out.clone(),
            seed: self.seed,
            mode: self.mode,
            k: self.k,
            r: self.r,
            rounds: self.rounds,
            clients: self.clients,
            alpha: self.alpha,
            subset: self.subset,
        };
        Ok(base.with_overrides(&overrides)?)
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Run(args) => {
            commands::cmd_run(&args.load()?, &mut stdout)?;
        }
        Command::Attack { runs, out, round } => {
            commands::cmd_attack(&runs, out.as_deref(), round, &mut stdout)?;
        }
        Command::Budget { config, params } => {
            commands::cmd_budget(&config.load()?, params, &mut stdout)?;
        }
        Command::LossCurve { runs, out } => match out {
            Some(path) => {
                let mut file = std::fs::File::create(&path)
                    .with_context(|| format!("creating {}", path.display()))?;
                commands::cmd_loss_curve(&runs, &mut file)?;
            }
            None => {
                commands::cmd_loss_curve(&runs, &mut stdout)?;
            }
        },
        Command::PartitionStats(args) => {
            commands::cmd_partition_stats(&args.load()?, &mut stdout)?;
        }
    }
    Ok(())
}
