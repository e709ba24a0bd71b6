//! `tcam`: data generation, training, inference, sweeps, ablations,
//! heatmap export and a gradient self-check behind one executable.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

pub mod colormap;
mod commands;
pub mod config;
pub mod heatmap;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use transcam::cam::{BlockRange, Coupling};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(transcam::Error),
}

impl From<transcam::Error> for CliError {
    fn from(e: transcam::Error) -> Self {
        match e {
            transcam::Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "tcam", version, about = "Attention-refined class activation maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Train a network and write checkpoint, metrics and resolved config.
    Train(TrainArgs),
    /// Pseudo labels and class heatmaps for one image.
    Infer(InferArgs),
    /// Coupling, block-range and logit-weight comparison table.
    Ablate(AblateArgs),
    /// Pseudo-label mIoU over a threshold grid.
    SweepTau(SweepArgs),
    /// Heatmaps of every coupling stage and of attention rows.
    ExportHeatmaps(ExportArgs),
    /// Compare reverse-mode and finite-difference gradients of the network.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training samples.
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub n_eval: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Comma-separated subset of disk,rectangle,triangle.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Run-configuration overrides; each one beats the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct RunOverrides {
    /// JSON run configuration; missing fields take built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub w_conv: Option<f64>,
    #[arg(long)]
    pub w_trans: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub range: Option<RangeArg>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunOverrides,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    pub tau: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Transcam)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = RangeArg::Aa)]
    pub range: RangeArg,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,1.5")]
    pub scales: Vec<f64>,
    /// Keep maps of classes the network predicts absent.
    #[arg(long)]
    pub no_gate: bool,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub run: RunOverrides,
    /// Epochs for each logit-weight retraining; defaults to the run's epochs.
    #[arg(long)]
    pub sweep_epochs: Option<usize>,
    /// Groups to run.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "coupling,range,weights")]
    pub groups: Vec<GroupArg>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Transcam)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = RangeArg::Aa)]
    pub range: RangeArg,
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,1.5")]
    pub scales: Vec<f64>,
    #[arg(long)]
    pub no_gate: bool,
    /// JSON report destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "baseline,clsattn,attnagg,transcam")]
    pub modes: Vec<ModeArg>,
    #[arg(long, value_enum, default_value_t = RangeArg::Aa)]
    pub range: RangeArg,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub scales: Vec<f64>,
    /// Image pixel `row,col` whose attention row is rendered for AS, AD and AA.
    #[arg(long, value_delimiter = ',')]
    pub reference: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates sampled from every parameter tensor.
    #[arg(long, default_value_t = 1)]
    pub per_tensor: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// JSON run configuration whose network is checked.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Clsattn,
    Attnagg,
    Transcam,
}

impl From<ModeArg> for Coupling {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => Coupling::None,
            ModeArg::Clsattn => Coupling::ClsAttn,
            ModeArg::Attnagg => Coupling::AttnAgg,
            ModeArg::Transcam => Coupling::TransCam,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RangeArg {
    As,
    Ad,
    Aa,
}

impl From<RangeArg> for BlockRange {
    fn from(r: RangeArg) -> Self {
        match r {
            RangeArg::As => BlockRange::Shallow,
            RangeArg::Ad => BlockRange::Deep,
            RangeArg::Aa => BlockRange::All,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GroupArg {
    Coupling,
    Range,
    Weights,
}

/// Worker cap from `TCAM_THREADS`, when set to a positive integer.
fn apply_thread_cap() -> CliResult<()> {
    match std::env::var("TCAM_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Usage(format!("TCAM_THREADS must be a positive integer, got `{v}`")))?;
            transcam::train::set_max_workers(n);
            Ok(())
        }
        Err(_) => Ok(()),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = apply_thread_cap().and_then(|_| commands::dispatch(cli.command));
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("run `tcam --help` for usage");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
