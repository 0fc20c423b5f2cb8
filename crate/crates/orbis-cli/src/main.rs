mod commands;
mod config;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

/// Token-reduction experiments and the cycle-level hardware model: matchers,
/// similarity analysis, the FC/RC pipeline, and variant simulation.
#[derive(Parser)]
#[command(name = "orbis", version, about)]
pub struct Cli {
    /// TOML config file (hardware model, sim parameters, matcher defaults)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory for generated files
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    /// Seed list; commands that run one instance use the first seed
    #[arg(long, global = true, value_delimiter = ',', default_value = "0")]
    pub seed: Vec<u64>,

    /// Dotted-path config overrides, e.g. --set hardware.vpu_lanes=256
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Build token index pairs from a fixture file or synthetic clusters
    Match(MatchArgs),
    /// Per-layer similarity-map correlations over a synthetic trajectory
    Similarity(SimilarityArgs),
    /// Run the FC/RC reduction pipeline over a synthetic trajectory
    Pipeline(PipelineArgs),
    /// Simulate hardware variants: speedup, energy and area breakdowns
    Simulate(SimulateArgs),
    /// Sweep reduction ratios for one variant
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MatcherArg {
    Bsm,
    Datm,
    DatmQ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GuidanceArg {
    Output,
    Input,
}

#[derive(clap::Args)]
pub struct MatchArgs {
    /// Token-matrix fixture to match on (mutually exclusive with --tokens)
    #[arg(long, conflicts_with = "tokens")]
    pub input: Option<PathBuf>,

    /// Synthetic fixture: token count
    #[arg(long)]
    pub tokens: Option<usize>,
    /// Synthetic fixture: channel count
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    /// Synthetic fixture: cluster count
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    /// Synthetic fixture: cluster center spread
    #[arg(long, default_value_t = 3.0)]
    pub spread: f64,
    /// Synthetic fixture: within-cluster noise (0 gives exact duplicates)
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,

    #[arg(long, value_enum, default_value_t = MatcherArg::Datm)]
    pub matcher: MatcherArg,
    #[arg(long, default_value_t = 0.5)]
    pub ratio: f64,
    /// Initial dst count (default: ceil(tokens / 4))
    #[arg(long)]
    pub k_dst: Option<usize>,
    /// Pair file to write (default: <out>/pairs.orbp)
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct TrajectoryArgs {
    #[arg(long, default_value_t = 128)]
    pub tokens: usize,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub timesteps: usize,
    /// Never-reduced tail tokens appended to the sequence
    #[arg(long, default_value_t = 0)]
    pub text_tokens: usize,
    /// Temporal consistency alpha in [0, 1]
    #[arg(long, default_value_t = 0.9)]
    pub alpha: f64,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
}

#[derive(clap::Args)]
pub struct SimilarityArgs {
    #[command(flatten)]
    pub traj: TrajectoryArgs,
}

#[derive(clap::Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub traj: TrajectoryArgs,
    #[arg(long, value_enum, default_value_t = MatcherArg::Datm)]
    pub matcher: MatcherArg,
    #[arg(long, value_enum, default_value_t = GuidanceArg::Output)]
    pub guidance: GuidanceArg,
    #[arg(long, default_value_t = 0.25)]
    pub ratio: f64,
    /// RC steps reusing each FC step's pairs
    #[arg(long, default_value_t = 3)]
    pub rc_per_fc: usize,
}

#[derive(clap::Args)]
pub struct SimulateArgs {
    /// Workload preset: toy, cogvideox-like, hunyuanvideo-like
    #[arg(long, default_value = "hunyuanvideo-like")]
    pub preset: String,
    /// Variants to simulate (comma-separated labels); default: all five
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
}

#[derive(clap::Args)]
pub struct SweepArgs {
    #[arg(long, default_value = "hunyuanvideo-like")]
    pub preset: String,
    /// Variant whose reduction ratio is swept (ogm, ogm-datm-nohw, all)
    #[arg(long, default_value = "all")]
    pub variant: String,
    /// Comma-separated reduction ratios
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,0.75")]
    pub ratios: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
