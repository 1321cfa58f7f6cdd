//! Command-line front end for metaorder reconstruction and analysis.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metaorder_core::Error;

#[derive(Parser, Debug)]
#[command(name = "metaorder", version, about = "Synthetic metaorders, impact stylised facts and order-splitting inference")]
pub struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed; for `run` it replaces every scenario and simulator seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse raw trade files into a normalised trade table.
    Ingest(IngestArgs),
    /// Daily volume and volatility with 20-day trailing averages.
    Stats(TradesArgs),
    /// Map every trade onto a synthetic trader.
    Assign(AssignArgs),
    /// Build metaorders from trades and a trader assignment.
    Metaorders(UnitArgs),
    /// Stylised-fact curves and fits.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Order-splitting inference.
    #[command(subcommand)]
    Lmf(LmfCommand),
    /// Generate order flow from the order-splitting model.
    Simulate(SimulateArgs),
    /// Run the full configured pipeline.
    Run,
    /// Write a deterministic synthetic trade corpus and a matching config.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Trade files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = ",")]
    pub delimiter: char,
}

#[derive(Args, Debug)]
pub struct TradesArgs {
    /// Trade files in the normalised layout.
    #[arg(long = "trades", required = true, num_args = 1..)]
    pub trades: Vec<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParticipationKind {
    Homogeneous,
    PowerLaw,
}

#[derive(Args, Debug)]
pub struct ParticipationArgs {
    #[arg(long, value_enum, default_value = "homogeneous")]
    pub participation: ParticipationKind,
    #[arg(long, default_value_t = 2.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub f_min: f64,
    /// Defaults to the number of trades (or orders).
    #[arg(long)]
    pub f_max: Option<f64>,
}

#[derive(Args, Debug)]
pub struct AssignArgs {
    #[command(flatten)]
    pub trades: TradesArgs,
    #[arg(long)]
    pub n_traders: usize,
    #[command(flatten)]
    pub participation: ParticipationArgs,
}

#[derive(Args, Debug)]
pub struct UnitArgs {
    #[command(flatten)]
    pub trades: TradesArgs,
    /// Directory of `assign_<ticker>_<date>.csv` files.
    #[arg(long)]
    pub assign_dir: PathBuf,
    /// Daily statistics table.
    #[arg(long)]
    pub stats: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    Sql {
        #[arg(long)]
        metaorders: PathBuf,
        #[arg(long, default_value_t = 40)]
        bins: usize,
        #[arg(long)]
        per_stock: bool,
    },
    Duration {
        #[arg(long)]
        metaorders: PathBuf,
        #[arg(long, default_value_t = 40)]
        bins: usize,
    },
    Profile {
        #[arg(long)]
        metaorders: PathBuf,
        #[arg(long)]
        children: PathBuf,
        #[arg(long, default_value_t = 25)]
        bins: usize,
        #[arg(long, default_value_t = 10)]
        min_children: usize,
    },
    Decay {
        #[command(flatten)]
        unit: UnitArgs,
        #[arg(long, default_value_t = 30)]
        bins: usize,
        #[arg(long, default_value_t = 10.0)]
        z_max: f64,
    },
}

#[derive(Args, Debug, Clone)]
pub struct LmfFlags {
    #[arg(long)]
    pub tau_min: Option<usize>,
    #[arg(long)]
    pub tau_max: Option<usize>,
    #[arg(long)]
    pub acf_centered: bool,
    #[arg(long, default_value_t = 0.01)]
    pub st_test_level: f64,
    #[arg(long, default_value_t = 30)]
    pub min_orders: usize,
}

#[derive(Subcommand, Debug)]
pub enum LmfCommand {
    /// Sign autocorrelation and γ per ticker.
    Acf {
        #[command(flatten)]
        trades: TradesArgs,
        #[command(flatten)]
        flags: LmfFlags,
    },
    /// α from splitter run lengths, or from a file of lengths.
    Alpha {
        /// One length per line.
        #[arg(long, conflicts_with_all = ["trades", "assign_dir"])]
        lengths: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        trades: Vec<PathBuf>,
        #[arg(long, requires = "trades")]
        assign_dir: Option<PathBuf>,
        #[command(flatten)]
        flags: LmfFlags,
    },
    /// Pair per-stock reports and compare γ with α − 1.
    Compare {
        #[arg(long = "reports", required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub n_traders: usize,
    #[arg(long)]
    pub n_orders: usize,
    #[command(flatten)]
    pub participation: ParticipationArgs,
    #[arg(long, default_value_t = 2)]
    pub l_min: u64,
    #[arg(long)]
    pub l_cap: Option<u64>,
    #[command(flatten)]
    pub flags: LmfFlags,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub trades_per_day: usize,
}

/// Exit status for an error: 2 for configuration and schema problems,
/// 1 for everything else.
fn exit_status(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::MissingColumn(_) | Error::Parameter(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log_level)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    match commands::dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
