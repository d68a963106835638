//! Command-line surface: `prefinfer <stage> --config PATH [--seed N] [--out DIR] [--force]`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::Error;
use crate::pipeline::{run_stage, RunOptions, Stage};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "prefinfer", version, about = "Preference-induction pipeline on a synthetic preference world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the episode datasets.
    GenWorld(Common),
    /// Synthesize and filter cold-start records.
    Teach(Common),
    /// Supervised fine-tuning on the cold-start records.
    Sft(Common),
    /// Group-relative policy optimization.
    Rl {
        #[command(flatten)]
        common: Common,
        /// Start from freshly initialized parameters when no checkpoint is given.
        #[arg(long)]
        from_init: bool,
    },
    /// Evaluate a checkpoint on held-out episodes.
    Eval(Common),
    /// Render summary.json and curves.svg from metrics and an eval report.
    Report(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

fn build_config(common: &Common) -> Result<RunConfig, Error> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `argv` (including the program name), runs the stage and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let keys = RunConfig::help_text();
    let cmd = <Cli as clap::CommandFactory>::command()
        .after_long_help(keys.clone())
        .mut_subcommands(|s| s.after_long_help(keys.clone()));
    let matches = match cmd.try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_VALIDATION;
        }
    };
    let (stage, common, from_init) = match &cli.command {
        Command::GenWorld(c) => (Stage::GenWorld, c, false),
        Command::Teach(c) => (Stage::Teach, c, false),
        Command::Sft(c) => (Stage::Sft, c, false),
        Command::Rl { common, from_init } => (Stage::Rl, common, *from_init),
        Command::Eval(c) => (Stage::Eval, c, false),
        Command::Report(c) => (Stage::Report, c, false),
    };
    let config = match build_config(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.unwrap_or(0))
        .build();
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_RUNTIME;
        }
    };
    let opts = RunOptions {
        force: common.force,
        from_init,
    };
    match pool.install(|| run_stage(stage, &config, opts)) {
        Ok(out) => {
            for note in &out.notes {
                println!("{note}");
            }
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
