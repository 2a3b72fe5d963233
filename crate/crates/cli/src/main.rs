//! `sinesr` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use sinesr::config::default_keys;

#[derive(Parser, Debug)]
#[command(name = "sinesr", version, about = "Real-world super-resolution: degradation learning, pair synthesis, SR training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the degradation generator on clean and real-world images.
    TrainLr(Common),
    /// Write LR/HR training pairs and a manifest.
    SynthPairs(Common),
    /// Train the super-resolution generator on a pair manifest.
    TrainSr(Common),
    /// Super-resolve every image in `data.input`.
    Infer(WithEnsemble),
    /// Score a checkpoint on paired validation images.
    Evaluate(WithEnsemble),
    /// Apply the classical degradation chain to every image in `data.input`.
    Degrade(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed (run.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (run.out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Compute device (run.device); only `cpu` is available.
    #[arg(long)]
    pub device: Option<String>,
    /// Base directory for relative data paths (data.root).
    #[arg(long, env = "SINESR_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set sr_stage.batch_size=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct WithEnsemble {
    #[command(flatten)]
    pub common: Common,
    /// Average over the eight flips and rotations (eval.self_ensemble).
    #[arg(long)]
    pub self_ensemble: bool,
}

fn key_help() -> String {
    let keys = default_keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (defaults):\n");
    for (k, v) in keys {
        s += &format!("  {k:width$}  {v}\n");
    }
    s += "\nExit codes: 0 success, 1 runtime failure, 2 bad configuration or usage, 3 missing data.";
    s
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let help = key_help();
    let cmd = Cli::command()
        .after_long_help(help.clone())
        .mut_subcommands(|s| s.after_long_help(help.clone()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            eprintln!("sinesr: error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::TrainLr(c) => commands::train_lr(&c),
        Command::SynthPairs(c) => commands::synth_pairs(&c),
        Command::TrainSr(c) => commands::train_sr(&c),
        Command::Infer(c) => commands::infer(&c.common, c.self_ensemble),
        Command::Evaluate(c) => commands::evaluate(&c.common, c.self_ensemble),
        Command::Degrade(c) => commands::degrade(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = commands::classify(&e);
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("sinesr: error[{kind}]: {line}");
            ExitCode::from(code)
        }
    }
}
