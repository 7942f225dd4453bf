//! `dud`: synthesise data, co-train the VAE and direct denoisers, denoise
//! images and benchmark the inference modes.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dud_core::inference::{Aggregator, Mode};
use dud_core::LossKind;

use crate::error::Result;

#[derive(Parser)]
#[command(name = "dud", version, about = "Direct denoisers distilled from a noise-model VAE")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON). Defaults apply to missing fields.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set training.total_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it to disk.
    Synth {
        /// Destination directory; defaults to `dataset.path`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Co-train the VAE and the direct networks.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Denoise `.dud` images (files or directories).
    Denoise {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long, value_parser = parse_aggregator)]
        aggregator: Option<Aggregator>,
        /// Direct network to use in direct mode.
        #[arg(long, value_parser = parse_head)]
        head: Option<LossKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Time every inference mode on the test split and write CSV and plot.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also run N = 1000.
        #[arg(long)]
        with_1000: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every method on the test split by PSNR and, for conjugate data,
    /// against the closed-form posterior mean.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_json_enum<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    parse_json_enum(s)
}

fn parse_aggregator(s: &str) -> std::result::Result<Aggregator, String> {
    parse_json_enum(s)
}

fn parse_head(s: &str) -> std::result::Result<LossKind, String> {
    parse_json_enum(s)
}

fn run(cli: Cli) -> Result<()> {
    let seed_env = std::env::var(config::SEED_ENV).ok();
    let mut config = config::load(cli.global.config.as_deref(), &cli.global.sets, seed_env.as_deref())?;
    match cli.command {
        Command::Synth { out } => commands::synth(&config, out),
        Command::Train { resume, out } => {
            if let Some(out) = out {
                config.output_dir = out;
            }
            commands::train(&config, resume.as_deref())
        }
        Command::Denoise { checkpoint, mode, n_samples, aggregator, head, seed, output, inputs } => {
            let inf = &mut config.inference;
            inf.mode = mode.unwrap_or(inf.mode);
            inf.n_samples = n_samples.unwrap_or(inf.n_samples);
            inf.aggregator = aggregator.unwrap_or(inf.aggregator);
            inf.head = head.or(inf.head);
            inf.seed = seed.unwrap_or(inf.seed);
            inf.validate()?;
            commands::denoise(&config, checkpoint, &inputs, &output)
        }
        Command::Bench { checkpoint, with_1000, out } => {
            config.bench.with_1000 |= with_1000;
            commands::bench(&config, checkpoint, out)
        }
        Command::Eval { checkpoint, out } => commands::eval(&config, checkpoint, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
