//! Experiment runner. `spk fit` trains from a TOML config; `spk validate`
//! builds everything the config names and reports without training.
//!
//! Exit codes: 0 on success, 2 for configuration problems, 3 when a
//! training run aborts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spk::launch::{self, LaunchOptions};
use spk::manager::ResumeMode;

#[derive(Parser)]
#[command(name = "spk", version, about = "Self-supervised pretraining runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, with optional dotted-key overrides.
    Fit {
        /// Path to the experiment TOML.
        config: PathBuf,
        /// Overrides of the form `dotted.key=value`, applied left to right.
        overrides: Vec<String>,
        /// Run directory (outranks SPK_RUN_DIR and the config).
        #[arg(long)]
        run_dir: Option<String>,
        /// Resume policy: auto, never, or must (outranks SPK_RESUME).
        #[arg(long)]
        resume: Option<ResumeMode>,
        /// Global seed (outranks the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse a config and construct everything it names, without training.
    Validate {
        /// Path to the experiment TOML.
        config: PathBuf,
        /// Overrides of the form `dotted.key=value`, applied left to right.
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let code = match Cli::parse().command {
        Command::Fit {
            config,
            overrides,
            run_dir,
            resume,
            seed,
        } => fit(config, overrides, LaunchOptions { run_dir, resume, seed }),
        Command::Validate { config, overrides } => validate(config, overrides),
    };
    ExitCode::from(code)
}

fn fit(config: PathBuf, overrides: Vec<String>, opts: LaunchOptions) -> u8 {
    let prepared = match launch::resolve(&config, &overrides, opts)
        .and_then(|(cfg, resume)| launch::prepare(&cfg, resume))
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return launch::CONFIG_ERROR_CODE as u8;
        }
    };
    match prepared.run() {
        Ok(state) => {
            println!(
                "finished: {} epochs, {} steps",
                state.epoch, state.global_step
            );
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            launch::run_error_code(&e) as u8
        }
    }
}

fn validate(config: PathBuf, overrides: Vec<String>) -> u8 {
    match launch::resolve(&config, &overrides, LaunchOptions::default())
        .and_then(|(cfg, _)| launch::validate_config(&cfg))
    {
        Ok(report) => {
            println!("{report}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            launch::CONFIG_ERROR_CODE as u8
        }
    }
}
