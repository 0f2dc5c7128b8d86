//! Command-line entry point: `run` executes a config file, `validate` runs
//! the invariant suite. Every failure path exits nonzero with a JSON error
//! object on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfbsde::config::{parse_config, parse_config_with_overrides};
use mfbsde::runner::run_experiment;

const SEED_ENV: &str = "MFBSDE_SEED";

#[derive(Parser)]
#[command(name = "mfbsde", version, about = "Mean-field BSDE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the experiment described by a config file.
    Run {
        /// Path to the line-oriented `key = value` config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed, overriding both the config file and the environment.
        #[arg(long)]
        seed: Option<u64>,
        /// `key=value` overrides applied on top of the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the cross-module invariant suite; exits nonzero on any failure.
    Validate {
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the check summary.
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
}

fn fail(kind: &str, message: String) -> ExitCode {
    let payload = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{payload}");
    ExitCode::FAILURE
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            set,
        } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(text) => text,
                Err(e) => return fail("io", format!("cannot read `{}`: {e}", config.display())),
            };
            let mut overrides = Vec::new();
            for item in &set {
                let Some((key, value)) = item.split_once('=') else {
                    return fail("usage", format!("--set expects key=value, got `{item}`"));
                };
                overrides.push((key.trim().to_string(), value.trim().to_string()));
            }
            if let Some(dir) = &out {
                overrides.push(("out".to_string(), dir.display().to_string()));
            }
            let parsed = match parse_config_with_overrides(&text, &overrides, seed, env_seed()) {
                Ok(parsed) => parsed,
                Err(e) => return fail("config", e.to_string()),
            };
            match run_experiment(&parsed) {
                Ok(outcome) => {
                    for line in &outcome.check_lines {
                        println!("{line}");
                    }
                    println!("wrote {}", outcome.files.summary_path.display());
                    for path in &outcome.files.csv_paths {
                        println!("wrote {}", path.display());
                    }
                    if outcome.all_passed {
                        ExitCode::SUCCESS
                    } else {
                        fail("validate", "one or more checks failed".into())
                    }
                }
                Err(e) => fail("run", e.to_string()),
            }
        }
        Command::Validate { seed, out } => {
            let seed = seed.or_else(env_seed).unwrap_or(0);
            let text = format!(
                "model = zero\nkind = validate\nseed = {seed}\nout = {}\n",
                out.display()
            );
            let parsed = match parse_config(&text) {
                Ok(parsed) => parsed,
                Err(e) => return fail("config", e.to_string()),
            };
            match run_experiment(&parsed) {
                Ok(outcome) => {
                    for line in &outcome.check_lines {
                        println!("{line}");
                    }
                    if outcome.all_passed {
                        println!("all checks passed");
                        ExitCode::SUCCESS
                    } else {
                        fail("validate", "one or more checks failed".into())
                    }
                }
                Err(e) => fail("run", e.to_string()),
            }
        }
    }
}
