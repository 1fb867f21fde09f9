//! Command-line front end: shared configuration, artifact layout, the
//! subcommands and the self-test suite.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod suite;

use std::ffi::OsString;
use std::fmt::Display;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_SELFTEST: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Data {
        context: String,
        source: seqplace::Error,
    },
    #[error("self-test failed: {0}")]
    Selftest(String),
}

impl CliError {
    pub fn data(context: impl Display, source: impl Into<seqplace::Error>) -> Self {
        CliError::Data {
            context: context.to_string(),
            source: source.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data { .. } => EXIT_DATA,
            CliError::Selftest(_) => EXIT_SELFTEST,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "seqplace",
    version,
    about = "Sequence-based LiDAR place recognition"
)]
pub struct Cli {
    /// JSON run configuration; omitted blocks take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Projects every scan of the dataset to a range image.
    Project,
    /// Builds the pairwise overlap table.
    Label,
    /// Trains the network (phase 1) or the pooling exponent (phase 2).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
        /// Continues from the phase checkpoint if one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Computes a global descriptor for every scan that ends a full sequence.
    Describe {
        /// Feeds scans one at a time through the online cache.
        #[arg(long)]
        stream: bool,
    },
    /// Builds the search index from the database descriptors.
    Index,
    /// Retrieves the nearest database sequences for every query.
    Query {
        #[arg(long, default_value_t = 20)]
        top_k: usize,
    },
    /// Reports AR@N and the precision-recall curve.
    Eval,
    /// Measures per-scan latency against a synthetic index.
    Bench {
        #[arg(long, default_value_t = 10_000)]
        index_size: usize,
        #[arg(long, default_value_t = 100)]
        scans: usize,
    },
    /// Runs the invariance and gradient suite.
    Selftest,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Project => "project",
            Command::Label => "label",
            Command::Train { phase: 1, .. } => "train-phase1",
            Command::Train { .. } => "train-phase2",
            Command::Describe { .. } => "describe",
            Command::Index => "index",
            Command::Query { .. } => "query",
            Command::Eval => "eval",
            Command::Bench { .. } => "bench",
            Command::Selftest => "selftest",
        }
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match commands::execute(&cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
