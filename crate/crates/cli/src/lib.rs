//! Experiment driver: dataset generation, training, evaluation, ablation
//! grids and gradient checks.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the TOML
//! file given by `--config`, then flags. `--seed` sets the dataset seed, the
//! training seed and the ablation seed list at once.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use dfa::trainer::Variant;
use dfa::DfaError;

use crate::commands::ToleranceBreach;
use crate::config::{ExperimentConfig, Target};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dfa", version, about = "Dual-stream feature augmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic domains and a manifest to `<out>/data`.
    Generate(Common),
    /// Train on the sources and evaluate on each held-out domain.
    Train(Common),
    /// Evaluate a checkpoint on the configured held-out domain.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Every variant over every seed and target.
    Ablate(Common),
    /// Finite-difference check of every loss term.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub target: Option<Target>,
}

impl Common {
    /// File (or defaults) with flags applied on top, validated.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| DfaError::InvalidConfig(format!("reading {}: {e}", path.display())))?;
                ExperimentConfig::parse(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(t) = self.target {
            cfg.target_domain = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Generate(c) => {
            let dir = commands::generate_cmd(&c.resolve()?)?;
            Ok(format!("wrote {}\n", dir.display()))
        }
        Command::Train(c) => {
            let reports = commands::train_cmd(&c.resolve()?)?;
            Ok(reports
                .iter()
                .map(|r| {
                    format!(
                        "{} seed {} target {}: target_acc {:.4} train_acc {:.4}\n",
                        r.variant, r.seed, r.target, r.target_acc, r.train_acc
                    )
                })
                .collect())
        }
        Command::Eval { common, checkpoint } => {
            let r = commands::eval_cmd(&common.resolve()?, checkpoint)?;
            Ok(format!("target {}: accuracy {:.4}\n", r.target, r.target_acc))
        }
        Command::Ablate(c) => Ok(commands::ablate_cmd(&c.resolve()?)?.table()),
        Command::Gradcheck { seed, instances, out } => {
            let report = commands::gradcheck_cmd(*seed, *instances, out.as_deref())?;
            let text = commands::gradcheck_report_lines(&report);
            if !report.passed() {
                print!("{text}");
                return Err(ToleranceBreach(report.tolerance).into());
            }
            Ok(text)
        }
    }
}

/// Exit status for an error: numeric failures and tolerance breaches map to
/// 2, everything else to 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ToleranceBreach>() {
            return EXIT_NUMERIC;
        }
        if let Some(DfaError::NumericFailure { .. } | DfaError::NonFinite(_)) = cause.downcast_ref::<DfaError>() {
            return EXIT_NUMERIC;
        }
    }
    EXIT_INVALID
}

/// Parses `args`, runs the command, prints its output and returns the exit
/// status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
