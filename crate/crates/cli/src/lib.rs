//! Command-line front end: build, verify and certify maps, query insertion
//! regions and run the worked demonstrations.

pub mod commands;
pub mod demos;
pub mod documents;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

/// Failures with their process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// A construction or certificate does not exist for the input.
    #[error("{reason}: {detail}")]
    Infeasible { reason: String, detail: String, report: serde_json::Value },
    /// An input file is malformed.
    #[error("invalid input: {0}")]
    Schema(String),
    /// A verification ran but some check failed; `report` is the full
    /// diagnostic.
    #[error("checks failed: {summary}")]
    ChecksFailed { summary: String, report: String },
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Infeasible { .. } => 2,
            Self::Schema(_) => 3,
            Self::ChecksFailed { .. } | Self::Usage(_) | Self::Output { .. } => 1,
        }
    }
}

/// Default seed when neither `--seed` nor the environment gives one.
pub const DEFAULT_SEED: u64 = 0x5eed;

#[derive(Debug, Parser)]
#[command(name = "twistmap", version, about = "Build and certify C¹ homeomorphisms with bounded twist")]
pub struct Cli {
    /// Master seed for all sampling.
    #[arg(long, global = true, env = "TWISTMAP_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Text,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extend a finite set of pairs to a map with certified twist below θ.
    Extend {
        /// Pairs CSV with header d0..d(n-1),e0..e(n-1).
        pairs: String,
        /// Twist bound in degrees.
        #[arg(long)]
        theta: f64,
        /// Also make the map a translation near every domain point.
        #[arg(long)]
        nice: bool,
        /// Output map document; standard output when absent.
        #[arg(long)]
        out: Option<String>,
    },
    /// Run the sampled membership checks on a map document.
    Verify {
        map: String,
        /// Base sample count.
        #[arg(long, default_value_t = 2000)]
        budget: usize,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
        /// Twist bound in degrees; defaults to the document's bound.
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Evaluate a map and its Jacobian determinant on a regular grid.
    EvalGrid {
        map: String,
        /// `lo:hi:count` per axis, comma separated, or one axis for all.
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        out: Option<String>,
    },
    /// Certify absolute continuity: `k` and `δ = ε/(2k)`.
    AcCert {
        map: String,
        #[arg(long)]
        epsilon: f64,
        /// Monte Carlo samples for the measured integrals.
        #[arg(long, default_value_t = 200_000)]
        budget: usize,
        /// Level budget `Υ(0),…,Υ(m−1)` as comma-separated rationals; the
        /// certificate then uses its tail sums.
        #[arg(long)]
        upsilon: Option<String>,
    },
    /// Rasterise where a new point may be sent under a planar condition.
    InsertFeas {
        condition: String,
        /// Domain point, `x,y`.
        #[arg(long, allow_hyphen_values = true)]
        d: String,
        /// Twist bound in degrees.
        #[arg(long)]
        theta: f64,
        /// Search box `x_min,x_max,y_min,y_max`.
        #[arg(long = "box", default_value = "-20,20,-20,20", allow_hyphen_values = true)]
        search_box: String,
        /// Cells per axis.
        #[arg(long, default_value_t = 512)]
        res: usize,
        /// Raster CSV output.
        #[arg(long)]
        out: Option<String>,
    },
    /// Worked demonstrations: noac, merge1d, eighteen.
    Demo {
        name: String,
        /// Directory for the emitted files.
        #[arg(long)]
        out: Option<String>,
    },
}

/// Parse arguments and run; returns the exit code. Normal output goes to
/// `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        // A global pool can only be installed once per process; later
        // calls keep the first setting.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match commands::dispatch(&cli) {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            0
        }
        Err(e) => {
            match &e {
                CliError::Infeasible { report, .. } => {
                    let _ = writeln!(out, "{}", serde_json::to_string_pretty(report).unwrap_or_default());
                }
                CliError::ChecksFailed { report, .. } => {
                    let _ = out.write_all(report.as_bytes());
                }
                _ => {}
            }
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
