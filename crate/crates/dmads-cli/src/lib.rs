//! Command-line front end: `train`, `infer`, `eval`, `overlay`, `synth`,
//! `inspect`. The binary in `main.rs` is a thin wrapper around [`run_cli`]
//! so tests can drive the interface in-process.

pub mod commands;
pub mod config;
pub mod dataset;

use std::fmt;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

/// CLI failure, carrying its exit category.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config keys: exit 1.
    Usage(String),
    /// Missing or malformed inputs/outputs: exit 2.
    Data(String),
    /// Numerical abort during training/inference: exit 3.
    Numerical(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<dmads_core::Error> for CliError {
    fn from(err: dmads_core::Error) -> Self {
        use dmads_core::Error as E;
        match &err {
            E::NonFiniteLoss { .. } | E::NonFinite { .. } => CliError::Numerical(err.to_string()),
            E::InvalidConfig { .. } => CliError::Usage(err.to_string()),
            _ => CliError::Data(err.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "dmads",
    about = "Dual-encoder attention segmentation network: training, inference and evaluation",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key=value config file; writes the best checkpoint and a
    /// line-delimited JSON log into the configured output directory.
    Train {
        /// Path to the run configuration (key=value lines).
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a checkpoint on one image and write the binary mask PNG.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score predicted masks against ground truth and write a JSON report.
    Eval {
        #[arg(long = "pred-dir")]
        pred_dir: PathBuf,
        #[arg(long = "gt-dir")]
        gt_dir: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Render the red/green error overlay for one prediction.
    Overlay {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Optional background image blended under the correct pixels.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic ellipse dataset.
    Synth {
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print parameter and multiply-accumulate counts of a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Parse and dispatch. Returns the process exit code; errors are printed to
/// stderr with the stable `dmads:` prefix.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version are not errors.
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{err}");
                return 0;
            }
            eprintln!("dmads: {err}");
            return 1;
        }
    };

    let result = match cli.command {
        Command::Train { config } => commands::train(&config),
        Command::Infer { ckpt, input, output } => commands::infer(&ckpt, &input, &output),
        Command::Eval { pred_dir, gt_dir, report } => commands::eval(&pred_dir, &gt_dir, &report),
        Command::Overlay { pred, gt, image, out } => {
            commands::overlay(&pred, &gt, image.as_deref(), &out)
        }
        Command::Synth { out_dir, count, size, seed } => {
            commands::synth(&out_dir, count, size, seed)
        }
        Command::Inspect { ckpt } => commands::inspect(&ckpt),
    };

    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("dmads: {err}");
            err.exit_code()
        }
    }
}
