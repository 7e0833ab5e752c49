use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use qoecast::telemetry::TraceFormat;
use qoecast::VariantId;

#[derive(Debug, Parser)]
#[command(
    name = "qoecast",
    version,
    about = "Short-horizon video QoE forecasting workflow"
)]
pub struct Cli {
    /// Master seed; every random choice of the run derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: run/<utc timestamp>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize labeled telemetry traces.
    Generate(GenerateArgs),
    /// Window, scale and split traces into a dataset.
    Prepare(PrepareArgs),
    /// Train one variant or all of them.
    Train(TrainArgs),
    /// Test-set metrics of trained bundles.
    Evaluate(EvaluateArgs),
    /// Metrics, latency, rankings and error densities.
    Benchmark(BenchmarkArgs),
    /// Explain one forecast.
    Explain(ExplainArgs),
    /// Stream decisions for NDJSON telemetry on stdin or TCP.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Ndjson,
}

impl From<Format> for TraceFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => TraceFormat::Csv,
            Format::Ndjson => TraceFormat::Ndjson,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ig,
    Attention,
    Lime,
}

fn parse_variant(s: &str) -> Result<VariantId, String> {
    s.parse::<VariantId>().map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Trace length in seconds.
    #[arg(long)]
    pub duration: Option<u32>,
    #[arg(long, default_value_t = 6)]
    pub traces: usize,
    #[arg(long)]
    pub window_s: Option<u32>,
    /// TOML generator config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Directory of trace files (`.csv`/`.ndjson` with optional `.labels.csv`).
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub tick_s: f64,
    #[arg(long, default_value_t = 10)]
    pub window_s: u32,
    #[arg(long, default_value_t = 5)]
    pub context: usize,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("which").required(true).args(["variant", "all"])))]
pub struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<VariantId>,
    #[arg(long)]
    pub all: bool,
    /// TOML training config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding `<variant>.bundle` files.
    #[arg(long)]
    pub models: PathBuf,
    /// Restrict to these variants.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Vec<VariantId>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("which").required(true).args(["variant", "all"])))]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Vec<VariantId>,
    #[arg(long)]
    pub all: bool,
    /// Trained bundles; when absent the variants are trained first.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    /// Histogram bins of the error densities.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Position in the test split.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Ig)]
    pub method: MethodArg,
    #[arg(long, default_value_t = qoecast::explain::DEFAULT_IG_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    /// LIME perturbation count.
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Listen on this address instead of reading stdin.
    #[arg(long)]
    pub listen: Option<String>,
    /// Stop after this many TCP connections.
    #[arg(long)]
    pub max_connections: Option<usize>,
    /// Read telemetry from a file instead of stdin.
    #[arg(long, conflicts_with = "listen")]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 50.0)]
    pub policy_alert: f64,
    #[arg(long, default_value_t = 70.0)]
    pub policy_bitrate: f64,
    #[arg(long, default_value_t = 3.0)]
    pub hysteresis: f64,
    #[arg(long)]
    pub explain_on_alert: bool,
    #[arg(long, default_value_t = 1000)]
    pub tick_ms: u64,
}
