//! `ssboost` command-line front end.
//!
//! Settings are layered: defaults, then the `--config` TOML file, then
//! `SSBOOST_`-prefixed environment variables, then flags. Exit codes:
//! 0 success, 2 I/O or format error, 3 incompatible inputs, 4 invalid
//! arguments or configuration.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ssboost::Budget;

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;
pub const EXIT_INVALID: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_MISMATCH,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }

    pub fn from_lib(e: ssboost::Error) -> Self {
        use ssboost::Error as E;
        let code = match &e {
            E::Io(_) | E::Json(_) | E::Format(_) => EXIT_IO,
            E::Incompatible(_) | E::DimensionMismatch { .. } | E::Hierarchy(_) => EXIT_MISMATCH,
            E::InvalidInput(_) | E::OutOfRange { .. } | E::Empty(_) => EXIT_INVALID,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ssboost::Error> for CliError {
    fn from(e: ssboost::Error) -> Self {
        Self::from_lib(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

const AFTER_HELP: &str = "\
Any configuration key can be overridden from the environment with the
SSBOOST_ prefix and `__` between nested keys, e.g.
  SSBOOST_TRAIN__ITERATIONS=20  SSBOOST_GENERATE__SCENE__WIDTH=32
Flags take precedence over the environment, which takes precedence over
the --config file.

Exit codes: 0 ok, 2 I/O or format error, 3 incompatible inputs,
4 invalid arguments or configuration.";

#[derive(Debug, Parser)]
#[command(name = "ssboost", version, about = "Anytime structured prediction with cost-greedy boosting", after_help = AFTER_HELP)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for scene generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Inference budget in cost units, or `unlimited`.
    #[arg(long, global = true)]
    pub budget: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus and its manifest.
    Generate {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model on a generated corpus.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Boosting iterations.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Run a model under the budget; write labels, stage masks and ledgers.
    Infer(ModelArgs),
    /// Trace accuracy against cost over a budget grid.
    Profile(ModelArgs),
    /// Per-scene and mean metrics under the budget.
    Eval(ModelArgs),
}

#[derive(Debug, clap::Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
}

/// Parses `args` and runs the command. Returns the text to print on success;
/// help and version requests succeed with clap's rendering.
pub fn run<I, T>(args: I, vars: Vec<(String, String)>) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(e.to_string()),
                _ => {
                    let text = e.to_string();
                    Err(CliError::invalid(text.strip_prefix("error: ").unwrap_or(&text)))
                }
            };
        }
    };
    let mut cfg = config::load(cli.config.as_deref(), vars)?;
    if let Some(seed) = cli.seed {
        cfg.generate.seed = seed;
        cfg.train.seed = seed;
    }
    let budget = match &cli.budget {
        Some(b) => b.parse::<Budget>().map_err(|e| CliError::invalid(e.to_string()))?,
        None => cfg.infer.budget.resolve()?,
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::invalid("--jobs must be at least 1"));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let out = commands::out_dir(cli.out.as_ref(), &cfg);
    check_out(&out)?;

    match cli.command {
        Command::Generate { count } => {
            if let Some(n) = count {
                cfg.generate.count = n;
            }
            cfg.generate.scene.validate()?;
            commands::cmd_generate(&cfg, &out)
        }
        Command::Train { data, iterations } => {
            if let Some(t) = iterations {
                cfg.train.iterations = t;
            }
            let data = data_dir(data, &cfg)?;
            commands::cmd_train(&cfg, &data, &out)
        }
        Command::Infer(a) => {
            let (data, model) = model_inputs(a, &cfg)?;
            commands::cmd_infer(&model, &data, budget, &out)
        }
        Command::Profile(a) => {
            let (data, model) = model_inputs(a, &cfg)?;
            commands::cmd_profile(&cfg, &model, &data, &out)
        }
        Command::Eval(a) => {
            let (data, model) = model_inputs(a, &cfg)?;
            commands::cmd_eval(&model, &data, budget, &out)
        }
    }
}

fn check_out(out: &Path) -> Result<(), CliError> {
    if out.exists() && !out.is_dir() {
        return Err(CliError::io(format!("{} exists and is not a directory", out.display())));
    }
    Ok(())
}

fn data_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = flag
        .or_else(|| cfg.paths.data.clone())
        .ok_or_else(|| CliError::invalid("no dataset given (--data or paths.data)"))?;
    if !dir.join(commands::MANIFEST).is_file() {
        return Err(CliError::io(format!("{} has no {}", dir.display(), commands::MANIFEST)));
    }
    Ok(dir)
}

fn model_inputs(a: ModelArgs, cfg: &RunConfig) -> Result<(PathBuf, PathBuf), CliError> {
    let data = data_dir(a.data, cfg)?;
    let model = a
        .model
        .or_else(|| cfg.paths.model.clone())
        .ok_or_else(|| CliError::invalid("no model given (--model or paths.model)"))?;
    if !model.is_file() {
        return Err(CliError::io(format!("model {} not found", model.display())));
    }
    Ok((data, model))
}
