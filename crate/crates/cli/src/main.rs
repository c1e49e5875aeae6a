mod commands;
mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;

const FAILED_MARKER: &str = "FAILED";

#[derive(Parser)]
#[command(name = "advstereo", about = "Adversarial stereo cost aggregation and confidence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write synthetic stereo samples.
    Synth,
    /// Train both networks, checkpointing every epoch.
    Train,
    /// Write disparity and confidence maps for a dataset.
    Infer,
    /// Propagate confident disparities.
    Refine,
    /// Score predictions and write reports.
    Eval,
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Print the configuration keys with their defaults.
    Keys,
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for pair in &cli.set {
        cfg.apply_override(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn run(command: Command, cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let need_out = || match out {
        Some(o) => Ok(o),
        None => bail!("--out DIR is required for this command"),
    };
    match command {
        Command::Synth => commands::synth(cfg, need_out()?),
        Command::Train => commands::train(cfg, need_out()?),
        Command::Infer => commands::infer_cmd(cfg, need_out()?),
        Command::Refine => commands::refine_cmd(cfg, need_out()?),
        Command::Eval => commands::eval_cmd(cfg, need_out()?),
        Command::Gradcheck => commands::gradcheck(cfg, out),
        Command::Keys => {
            for s in config::SCHEMA {
                println!("{}={}\t# {}", s.key, s.default, s.help);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match effective_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let out = cli.out.as_deref();
    if let Some(dir) = out {
        let prepared = fs::create_dir_all(dir)
            .and_then(|_| match fs::remove_file(dir.join(FAILED_MARKER)) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
                _ => Ok(()),
            })
            .and_then(|_| fs::write(dir.join("config.txt"), cfg.to_text()));
        if let Err(e) = prepared {
            eprintln!("error: preparing {}: {e}", dir.display());
            return ExitCode::from(2);
        }
    }
    match run(cli.command, &cfg, out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(dir) = out {
                let _ = fs::write(dir.join(FAILED_MARKER), format!("{e:#}\n"));
            }
            ExitCode::FAILURE
        }
    }
}
