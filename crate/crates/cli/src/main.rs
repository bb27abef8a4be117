use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gfl_cli::commands::{self, SweepAxis};
use gfl_cli::config::RunConfig;

/// Few-shot node classification on synthetic graph families: data generation,
/// episodic meta-training, evaluation against baselines, ablations, and
/// sensitivity sweeps.
#[derive(Parser)]
#[command(name = "gfl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand: a key-value config file plus
/// `key=value` overrides (overrides win).
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.alpha=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph family and write the dataset container.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset file.
        #[arg(long, default_value = "family.gfl")]
        out: PathBuf,
    },
    /// Meta-train on a family; writes a checkpoint and a metrics log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset file produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the meta-test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also score the label-propagation and k-NN baselines.
        #[arg(long)]
        baselines: bool,
        /// Optional JSONL report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the five model variants plus baselines.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        /// Seeds to average over (defaults to the configured train seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Sensitivity sweep along one axis.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// One of: mu, similarity, distance, shots.
        #[arg(long)]
        axis: String,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Finite-difference checks of every tensor op and the full objective.
    Gradcheck {
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Worker count (0 = all cores).
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Export per-node embeddings as CSV for external plotting.
    Embed {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "embeddings")]
        out: PathBuf,
        /// Which split to export: train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen { config, out } => commands::cmd_gen(&config.resolve()?, &out),
        Command::Train { config, data, out } => {
            commands::cmd_train(&config.resolve()?, &data, &out).map(|_| ())
        }
        Command::Eval {
            config,
            data,
            checkpoint,
            baselines,
            out,
        } => commands::cmd_eval(
            &config.resolve()?,
            &data,
            &checkpoint,
            baselines,
            out.as_deref(),
        )
        .map(|_| ()),
        Command::Ablate {
            config,
            data,
            out,
            seeds,
        } => commands::cmd_ablate(&config.resolve()?, &data, &out, &seeds).map(|_| ()),
        Command::Sweep {
            config,
            data,
            axis,
            out,
            seeds,
        } => {
            let axis = SweepAxis::parse(&axis)?;
            commands::cmd_sweep(&config.resolve()?, &data, axis, &out, &seeds).map(|_| ())
        }
        Command::Gradcheck { tolerance, workers } => commands::cmd_gradcheck(tolerance, workers),
        Command::Embed {
            config,
            data,
            checkpoint,
            out,
            split,
        } => commands::cmd_embed(&config.resolve()?, &data, &checkpoint, &out, &split).map(|_| ()),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
