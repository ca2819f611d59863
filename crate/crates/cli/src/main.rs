//! `ibanet` command-line driver.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
//! 3 data error, 4 training divergence.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{read_config_file, RawConfig};
use crate::error::{exit, CliError};

#[derive(Parser)]
#[command(name = "ibanet", version, about = "Multi-rate fusion with a calibrated classifier head for imbalanced behaviour recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it as CSV.
    Synth(Common),
    /// Train and evaluate one fold of the split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Fold index to run.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Cross-validate over every fold.
    Cv(Common),
    /// Search the (tau, k) grid.
    Grid(Common),
    /// Run an ablation study.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// modules | fusion | rates | k-sweep | imbalance
        #[arg(long)]
        study: Option<String>,
    },
    /// Print the Gram matrix of generated ETF prototypes.
    EtfCheck {
        #[arg(long)]
        classes: usize,
        /// Prototype dimension, defaults to the class count.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare classifier angle spread with and without the calibrated head.
    Angles(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// goat | cattle | horse | goat-like
    #[arg(long)]
    profile: Option<String>,
    /// File of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.lr=1e-3. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Input CSV; implies data.source=csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for folds.
    #[arg(long)]
    jobs: Option<usize>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_effective_config: bool,
}

impl Common {
    fn resolve(&self, extra: &[(&str, String)]) -> Result<RawConfig, CliError> {
        let mut raw = RawConfig::default();
        if let Some(p) = &self.profile {
            raw.apply_profile(p)?;
        }
        if let Some(path) = &self.config {
            read_config_file(path, &mut raw)?;
        }
        for a in &self.set {
            raw.apply_assignment(a)?;
        }
        if let Some(path) = &self.data {
            raw.set("data.source", "csv")?;
            raw.set("data.path", &path.display().to_string())?;
        }
        let flags = [
            ("model.variant", self.variant.clone()),
            ("run.seed", self.seed.map(|v| v.to_string())),
            ("train.epochs", self.epochs.map(|v| v.to_string())),
            ("run.out", self.out.as_ref().map(|p| p.display().to_string())),
            ("run.jobs", self.jobs.map(|v| v.to_string())),
        ];
        for (k, v) in flags.iter().filter_map(|(k, v)| v.as_ref().map(|v| (*k, v))) {
            raw.set(k, v)?;
        }
        for (k, v) in extra {
            raw.set(k, v)?;
        }
        Ok(raw)
    }
}

type Handler = fn(&config::Settings, &RawConfig) -> Result<String, CliError>;

fn run(cli: Cli) -> Result<Option<String>, CliError> {
    let (common, extra, handler): (Common, Vec<(&str, String)>, Handler) = match cli.command {
        Command::EtfCheck { classes, dim, seed } => return commands::etf_check(classes, dim, seed).map(Some),
        Command::Synth(c) => (c, vec![], commands::synth),
        Command::Train { common, fold } => (common, fold.map(|f| ("run.fold", f.to_string())).into_iter().collect(), commands::train),
        Command::Cv(c) => (c, vec![], commands::cv),
        Command::Grid(c) => (c, vec![], commands::grid),
        Command::Ablate { common, study } => (common, study.map(|s| ("ablate.study", s)).into_iter().collect(), commands::ablate),
        Command::Angles(c) => (c, vec![], commands::angles),
    };
    let raw = common.resolve(&extra)?;
    let settings = raw.resolve()?;
    if common.print_effective_config {
        print!("{}", raw.render());
        return Ok(None);
    }
    handler(&settings, &raw).map(Some)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            if let Some(s) = summary {
                println!("{s}");
            }
            ExitCode::from(exit::OK)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
