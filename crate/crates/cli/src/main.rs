//! `cwrnn`: train, sweep, probe, compress, decode and benchmark coupled
//! WarpRNN video representations.

mod commands;
mod config;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cwrnn_core::model::Variant;

use crate::config::Overrides;

/// Raised for bad invocations; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "cwrnn",
    version,
    about = "Coupled WarpRNN implicit neural video representation"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "CWRNN_OUT")]
    out: Option<PathBuf>,
    /// v1, v2 or v3.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true)]
    target_params: Option<usize>,
    #[arg(long, global = true)]
    grid_ratio: Option<f64>,
    #[arg(long, global = true)]
    bits: Option<u8>,
    #[arg(long, global = true)]
    group_len: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Frame directory, raw clip, or `synth:<kind>:<T>x<H>x<W>`.
    #[arg(long, global = true)]
    video: Option<String>,
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            variant: self.variant,
            target_params: self.target_params,
            grid_ratio: self.grid_ratio,
            bits: self.bits,
            group_len: self.group_len,
            epochs: self.epochs,
            video: self.video.clone(),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to one clip; writes a checkpoint and metrics.csv.
    Train,
    /// Train at several grid ratios under one total budget.
    SweepRatio(commands::SweepRatioArgs),
    /// Insert frames of one clip into another and compare variants on them.
    SpliceProbe(commands::SpliceArgs),
    /// Quantize a checkpoint into a bitstream.
    Compress(commands::CompressArgs),
    /// Decode a bitstream or checkpoint into PNG frames.
    Decode(commands::DecodeArgs),
    /// Time frame decoding.
    Bench(commands::BenchArgs),
    /// Train, quantize and measure one point per budget; writes rd.csv.
    RdSweep(commands::RdSweepArgs),
    /// BD-rate between two RD CSV files.
    BdRate(commands::BdRateArgs),
    /// Write a synthetic clip as PNG frames.
    Synth(commands::SynthArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = commands::Context::new(&cli.global, cli.global.overrides())?;
    match cli.command {
        Command::Train => commands::train(&ctx),
        Command::SweepRatio(a) => commands::sweep_ratio(&ctx, &a),
        Command::SpliceProbe(a) => commands::splice_probe(&ctx, &a),
        Command::Compress(a) => commands::compress(&ctx, &a),
        Command::Decode(a) => commands::decode(&ctx, &a),
        Command::Bench(a) => commands::bench(&ctx, &a),
        Command::RdSweep(a) => commands::rd_sweep(&ctx, &a),
        Command::BdRate(a) => commands::bd_rate(&ctx, &a),
        Command::Synth(a) => commands::synth(&ctx, &a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
