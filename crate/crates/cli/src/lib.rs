//! Batch front end: `generate`, `fit-predict`, `evaluate` and `compare`.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand};
use insgp_core::kernels::KernelKind;
use insgp_core::{par, Error};

use crate::commands::Outcome;
use crate::config::{RunConfig, Settings, KEYS};

/// Exit code for each error class, in `--help` order.
pub const EXIT_CODES: &[(i32, &str)] = &[
    (0, "success"),
    (1, "one or more comparison runs failed"),
    (2, "command-line usage error"),
    (3, "invalid configuration"),
    (4, "file I/O error"),
    (5, "malformed input file"),
    (6, "invalid or duplicate location"),
    (7, "malformed dataset or split"),
    (8, "insufficient neighbors"),
    (9, "insufficient samples"),
    (10, "matrix not positive definite after jitter"),
    (11, "Karcher mean did not converge"),
    (12, "numerical failure"),
    (13, "MCMC rejected every proposal"),
    (14, "zero variance in observed values"),
    (15, "overlapping synthetic regions"),
    (16, "prediction and truth locations do not match"),
    (17, "degenerate CLS rotation"),
];

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => 3,
        Error::Io(_) => 4,
        Error::Parse { .. } | Error::Csv(_) => 5,
        Error::InvalidLocation { .. } | Error::DuplicateLocation { .. } => 6,
        Error::BadDataset(_) | Error::BadSplit { .. } | Error::DegenerateSeries => 7,
        Error::InsufficientNeighbors { .. } => 8,
        Error::InsufficientSamples { .. } => 9,
        Error::NotPositiveDefinite { .. } => 10,
        Error::NonConvergence { .. } => 11,
        Error::NumericalFailure(_) => 12,
        Error::AllProposalsRejected { .. } | Error::EmptyChain => 13,
        Error::ZeroVariance => 14,
        Error::OverlappingRegions { .. } => 15,
        Error::LocationMismatch { .. } => 16,
        Error::DegenerateRotation => 17,
    }
}

fn after_help() -> &'static str {
    static TEXT: OnceLock<String> = OnceLock::new();
    TEXT.get_or_init(|| {
        let mut s = String::from(
            "Configuration keys (TOML file via --config, or --set key=value; flags win over the file):\n",
        );
        for (k, d) in KEYS {
            s.push_str(&format!("  {k:<24} {d}\n"));
        }
        s.push_str("\nExit codes:\n");
        for (c, d) in EXIT_CODES {
            s.push_str(&format!("  {c:<3} {d}\n"));
        }
        s
    })
}

#[derive(Debug, Parser)]
#[command(name = "insgp", version, about = "Kriging with stationary, non-stationary and intrinsic non-stationary Matérn kernels")]
#[command(after_help = after_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = available parallelism)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Kernel for fit-predict
    #[arg(long, global = true)]
    pub kernel: Option<KernelKind>,
    /// Any configuration key, as key=value (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/test CSVs
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit one kernel and predict at test locations
    FitPredict {
        #[command(flatten)]
        common: Common,
        /// Training rates CSV
        #[arg(long)]
        train: Option<PathBuf>,
        /// Test locations CSV
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Score a predictions CSV against a truth CSV
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run the multi-run method comparison
    Compare {
        #[command(flatten)]
        common: Common,
        /// Number of runs
        #[arg(long)]
        runs: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::FitPredict { .. } => "fit-predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Compare { .. } => "compare",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Generate { common }
            | Command::FitPredict { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Compare { common, .. } => common,
        }
    }

    /// File, then `--set`, then dedicated flags.
    pub fn settings(&self) -> Result<Settings, Error> {
        let common = self.common();
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&common.set)?;
        let mut flags = RunConfig {
            seed: common.seed,
            threads: common.threads,
            out: common.out.clone(),
            kernel: common.kernel,
            ..RunConfig::default()
        };
        match self {
            Command::FitPredict { train, test, .. } => {
                flags.train = train.clone();
                flags.test = test.clone();
            }
            Command::Evaluate { predictions, truth, .. } => {
                flags.predictions = predictions.clone();
                flags.truth = truth.clone();
            }
            Command::Compare { runs, .. } => flags.n_runs = *runs,
            Command::Generate { .. } => {}
        }
        cfg.merge(flags).resolve()
    }
}

/// Resolves the configuration, runs the command on its own worker pool and
/// writes the sidecar.
pub fn run(cli: &Cli) -> Result<Outcome, Error> {
    let settings = cli.command.settings()?;
    std::fs::create_dir_all(&settings.out)?;
    let sidecar = settings.write_sidecar(cli.command.name())?;
    let outcome = par::with_threads(settings.threads, || match &cli.command {
        Command::Generate { .. } => commands::generate_cmd(&settings),
        Command::FitPredict { .. } => commands::fit_predict_cmd(&settings),
        Command::Evaluate { .. } => commands::evaluate_cmd(&settings),
        Command::Compare { .. } => commands::compare_cmd(&settings),
    })??;
    let mut files = outcome.files;
    files.push(sidecar);
    Ok(Outcome { files, ..outcome })
}
