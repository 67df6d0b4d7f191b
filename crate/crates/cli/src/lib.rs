//! Command-line front end: argument handling, configuration merging and the `train`,
//! `eval`, `infer` and `gradcheck` subcommands.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{parse_text, Resolver, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration (exit 2).
    Usage(String),
    /// The run itself failed (exit 1).
    Failure(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failure(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Failure(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(
    name = "slsdeep",
    version,
    about = "Skin lesion segmentation: train, evaluate, segment and gradient-check",
    after_help = "Any configuration key can be overridden as --<section>.<key>=<value>, \
                  e.g. --loss.use_epe=false or --network.width_scale=1/16. \
                  Sections: network, loss, train, augment, paths."
)]
pub struct Cli {
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (paths.out_dir).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for initialization, shuffling, dropout and augmentation (train.seed and augment.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from paths.train_manifest; validates on paths.val_manifest after every epoch.
    Train,
    /// Score paths.checkpoint on paths.eval_manifest at source resolution.
    Eval,
    /// Write a 0/255 mask PNG per input image at its source resolution.
    Infer {
        #[arg(required = true, value_name = "IMAGE")]
        images: Vec<PathBuf>,
        /// Also write the input with the mask boundary drawn in red.
        #[arg(long)]
        overlay: bool,
    },
    /// Run finite-difference gradient checks for one operation, `network`, or `all`.
    Gradcheck {
        #[arg(default_value = "all")]
        scope: String,
    },
}

/// `(key, value)` pairs from `--section.key=value` flags, in command-line order.
pub type Overrides = Vec<(String, String)>;

/// Separates `--section.key[=value]` overrides from the arguments clap handles.
pub fn split_overrides(args: Vec<OsString>) -> CliResult<(Vec<OsString>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            rest.push(arg);
            continue;
        };
        let (name, value) = match body.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| usage(format!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

/// Merges defaults, the config file, `--seed`/`--out` and the dotted overrides, in
/// increasing precedence.
pub fn resolve(cli: &Cli, overrides: &[(String, String)]) -> CliResult<RunConfig> {
    let mut r = Resolver::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
        for s in parse_text(&text, path).map_err(usage)? {
            r.apply(&s).map_err(usage)?;
        }
    }
    if let Some(seed) = cli.seed {
        r.set("train.seed", &seed.to_string()).map_err(usage)?;
        r.set("augment.seed", &seed.to_string()).map_err(usage)?;
    }
    if let Some(out) = &cli.out {
        r.set("paths.out_dir", &out.to_string_lossy()).map_err(usage)?;
    }
    for (k, v) in overrides {
        r.set(k, v).map_err(usage)?;
    }
    r.finish().map_err(usage)
}

/// Parses `args` (including the program name), runs the subcommand and returns the exit
/// code.
pub fn run(args: Vec<OsString>) -> i32 {
    let (rest, overrides) = match split_overrides(args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("{e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = resolve(&cli, &overrides).and_then(|cfg| commands::dispatch(&cli.command, cfg));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
