//! `sdd` command-line interface. [`run`] parses arguments, dispatches to a
//! command and maps failures to exit codes: 0 success, 1 invalid input or
//! configuration, 2 runtime failure.

mod commands;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sdd_core::SddError;

pub const DEFAULT_SEED: u64 = 46;

#[derive(Debug, Parser)]
#[command(name = "sdd", version, about = "Detect AI-generated images with a frozen ViT, token-bank reconstruction and a low-level enhancer")]
pub struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Validate configs, manifests, banks and checkpoints, then stop.
    #[arg(long, global = true)]
    pub dry_run: bool,

    /// Log progress to stderr (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Token-bank construction.
    #[command(subcommand)]
    Bank(BankCmd),
    /// Dataset generation.
    #[command(subcommand)]
    Data(DataCmd),
    /// Train a detector.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print a results table.
    Eval(EvalArgs),
    /// Robustness and sampling-rate sweeps.
    #[command(subcommand)]
    Sweep(SweepCmd),
    /// Feature diagnostics.
    #[command(subcommand)]
    Diag(DiagCmd),
    /// Re-render a saved evaluation report.
    Report(ReportArgs),
    /// Render a CSV export as an SVG figure.
    Plot(PlotArgs),
}

#[derive(Debug, Subcommand)]
pub enum BankCmd {
    /// Build a stratified token bank from the real training images.
    Build(BankBuildArgs),
}

#[derive(Debug, Subcommand)]
pub enum DataCmd {
    /// Write the seeded toy corpus and its manifest.
    Toy(ToyArgs),
}

#[derive(Debug, Subcommand)]
pub enum SweepCmd {
    /// Evaluate under Gaussian blur and JPEG compression levels.
    Robustness(RobustnessArgs),
    /// Rebuild the bank (and optionally retrain) for several sampling rates.
    Delta(DeltaArgs),
}

#[derive(Debug, Subcommand)]
pub enum DiagCmd {
    /// Per-dimension real/fake feature means per generator.
    Stats(StatsArgs),
    /// Histogram of cosine similarities between random image pairs.
    Cosine(CosineArgs),
}

/// Settings shared by commands that read a training config.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML or JSON training config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Backbone weight archive (relative paths also resolve in $SDD_CACHE_DIR).
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Bank sampling rate, e.g. `0.001` or `1/1000`.
    #[arg(long)]
    pub delta: Option<String>,
    /// Use a uniformly drawn bank of equal size instead of stratified sampling.
    #[arg(long)]
    pub no_sts: bool,
}

#[derive(Debug, Args)]
pub struct BankBuildArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// JSON-lines dataset manifest.
    #[arg(long, visible_alias = "manifest")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    /// Real/fake pairs; the corpus holds twice as many images.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Pairs in the test split (half of `--n` by default).
    #[arg(long)]
    pub test: Option<usize>,
    /// Pairs in the validation split.
    #[arg(long, default_value_t = 0)]
    pub val: usize,
    #[arg(long, default_value = "checker")]
    pub artifact: String,
    #[arg(long, default_value_t = 0.04)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Ablate the low-level enhancer (classify from the CLS token only).
    #[arg(long)]
    pub no_enhancer: bool,
    /// Train without low-rank adapters.
    #[arg(long)]
    pub no_adapters: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long, visible_alias = "manifest")]
    pub data: PathBuf,
    /// Checkpoint path; the bank is stored next to it as `<out>.bank`.
    #[arg(long)]
    pub out: PathBuf,
    /// Use an existing bank instead of building one.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Step log (JSON lines); `<out>.log.jsonl` by default.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Accept a checkpoint built against a different bank or backbone.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Token bank; `<checkpoint>.bank` by default.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableArg {
    Ap,
    Acc,
    Auroc,
    Racc,
    Facc,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Markdown,
    Jsonl,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, visible_alias = "manifest")]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum, default_value = "full")]
    pub table: TableArg,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: FormatArg,
    /// Row label in single-row tables.
    #[arg(long, default_value = "SDD")]
    pub method: String,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also save the full report as JSON (input of `sdd report`).
    #[arg(long)]
    pub report_json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, visible_alias = "manifest")]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "0,1,2,3")]
    pub sigmas: String,
    #[arg(long, default_value = "30,50,70,90,100")]
    pub qualities: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DeltaArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long, visible_alias = "manifest")]
    pub data: PathBuf,
    /// Comma-separated sampling rates, e.g. `1/500,1/1000`.
    #[arg(long)]
    pub values: String,
    /// Only build banks and report their fill rates.
    #[arg(long)]
    pub bank_only: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FeatureArgs {
    #[arg(long, visible_alias = "manifest")]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Use the adapted encoder of this checkpoint instead of the frozen one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Backbone settings when no checkpoint is given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Also export the raw CLS embeddings as CSV.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CosineArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    #[arg(long, default_value_t = sdd_core::evalkit::diag::DEFAULT_PAIRS)]
    pub pairs: usize,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    /// Restrict to one class (`real` or `fake`).
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON written by `sdd eval --report-json`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    pub table: TableArg,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: FormatArg,
    #[arg(long, default_value = "SDD")]
    pub method: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    RobustnessCurves,
    DeltaCurve,
    Histogram,
    Stats,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit code for an error chain: 1 when the root cause is a validation
/// failure, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<SddError>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if cause.downcast_ref::<csv::Error>().is_some() {
            return 1;
        }
    }
    2
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
