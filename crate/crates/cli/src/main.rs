//! `histofuse`: scan biopsy image trees, train and tune classifiers,
//! evaluate them, run two-stage predictions, and render training reports.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration, or input files. Exit code 2.
    Usage(String),
    /// Training diverged. Exit code 3.
    Numeric(String),
}

impl From<histofuse_core::Error> for CliError {
    fn from(e: histofuse_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

#[derive(Parser)]
#[command(name = "histofuse", version, about = "Multi-scale histopathology image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index every image under ROOT whose name follows the biopsy grammar.
    Scan {
        root: PathBuf,
        /// Manifest CSV to write. The skip report goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model described by a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Search learning rate and dropout with a particle swarm.
    Tune {
        #[arg(long)]
        config: PathBuf,
        /// Score particles with a closed-form stand-in instead of training.
        #[arg(long)]
        mock_objective: bool,
    },
    /// Score a saved model on every matching image of a manifest.
    Evaluate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify one image as benign or malignant, then by subtype.
    Predict {
        #[arg(long)]
        binary: PathBuf,
        #[arg(long)]
        benign: PathBuf,
        #[arg(long)]
        malignant: PathBuf,
        image: PathBuf,
    },
    /// Render accuracy and loss curves and a confusion heatmap as SVG.
    Report {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        confusion: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a procedural image tree that follows the biopsy naming grammar.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Images per subtype.
        #[arg(long, default_value_t = 10)]
        per_subtype: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the JSON schema of the run configuration.
    Schema,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("HISTOFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("HISTOFUSE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Scan { root, out } => commands::scan(&root, &out),
        Command::Train { config } => commands::train(&config),
        Command::Tune { config, mock_objective } => commands::tune(&config, mock_objective),
        Command::Evaluate { weights, manifest, out } => commands::evaluate(&weights, &manifest, &out),
        Command::Predict {
            binary,
            benign,
            malignant,
            image,
        } => commands::predict(&binary, &benign, &malignant, &image),
        Command::Report { history, confusion, out } => commands::report(&history, confusion.as_deref(), &out),
        Command::Synth {
            out,
            per_subtype,
            size,
            seed,
        } => commands::synth(&out, per_subtype, size, seed),
        Command::Schema => {
            print!("{}", config::SCHEMA);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
