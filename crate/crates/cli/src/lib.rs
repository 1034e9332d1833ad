//! Command-line front end: JSON-configured runs, ablations, drift
//! experiments and timing benchmarks.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lemo_core::DriftKind;

pub use commands::{cmd_ablate, cmd_bench, cmd_drift, cmd_run, AblateArgs, BenchArgs, BenchRow, DriftArgs, ModeArg, RunArgs};
pub use config::{apply_override, RunConfig, SourceConfig};
pub use error::{CliError, EXIT_CONFIG, EXIT_RUNTIME};

#[derive(Debug, Parser)]
#[command(name = "lemo", version, about = "Online anomaly detection with a learnable prototype memory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    pub config: PathBuf,
    /// Override a config value, e.g. `--set loss.tau=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (default: `out_dir` from the config, else runs/<timestamp>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Brightness,
    Gaussian,
}

impl From<KindArg> for DriftKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Brightness => DriftKind::Brightness,
            KindArg::Gaussian => DriftKind::Gaussian,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stream the training frames once, evaluating on the test split.
    Run {
        #[command(flatten)]
        common: Common,
        /// Write the anomaly map of every test frame under maps/.
        #[arg(long)]
        save_maps: bool,
    },
    /// Run the 3×3 grid of bank initializations and update strategies.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare clean and drifted accuracy for a frozen or an adapting model.
    Drift {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "brightness")]
        kind: KindArg,
        /// Drift magnitude (default: half the feature standard deviation).
        #[arg(long)]
        magnitude: Option<f64>,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
        /// Stream position where drift starts (default: mid-stream).
        #[arg(long)]
        onset: Option<usize>,
    },
    /// Time the online loop over N frames, averaged over repetitions.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

/// Dispatches a parsed command.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { common, save_maps } => cmd_run(&RunArgs {
            config: common.config,
            overrides: common.overrides,
            out: common.out,
            save_maps,
        })
        .map(drop),
        Command::Ablate { common } => cmd_ablate(&AblateArgs {
            config: common.config,
            overrides: common.overrides,
            out: common.out,
        })
        .map(drop),
        Command::Drift {
            common,
            kind,
            magnitude,
            mode,
            onset,
        } => cmd_drift(&DriftArgs {
            config: common.config,
            overrides: common.overrides,
            out: common.out,
            kind: kind.into(),
            magnitude,
            mode,
            onset,
        })
        .map(drop),
        Command::Bench { common, frames, reps } => cmd_bench(&BenchArgs {
            config: common.config,
            overrides: common.overrides,
            out: common.out,
            frames,
            reps,
        })
        .map(drop),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to standard error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("lemo: {e}");
            e.exit_code()
        }
    }
}
