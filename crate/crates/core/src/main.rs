use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use ev3::config::ExperimentConfig;
use ev3::harness::{emit_results, run_experiment, Experiment, Regime};
use ev3::model::write_params;

#[derive(Parser)]
#[command(name = "ev3", version, about = "Explore-assess-adapt training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher, run the requested regimes and write the results.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of vanilla,morphism,ev3_base,ev3_sat.
        #[arg(long, default_value = "vanilla,morphism,ev3_base,ev3_sat")]
        regimes: String,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run regimes concurrently; output is identical to a sequential run.
        #[arg(long)]
        parallel: bool,
    },
    /// Print a complete config file for a preset.
    GenConfig {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenConfig { preset } => {
            print!("{}", ExperimentConfig::preset(&preset)?.to_config_string());
        }
        Command::Run {
            config,
            out,
            regimes,
            seed,
            parallel,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let regimes = Regime::parse_list(&regimes)?;
            let exp = Experiment::prepare(&cfg).context("preparing data and teacher")?;
            eprintln!(
                "teacher {} test accuracy {:.4}",
                exp.teacher.spec, exp.teacher.test_accuracy
            );
            let results = run_experiment(&exp, &regimes, parallel)?;
            emit_results(&results, &out)?;
            write_params(&out.join("teacher.params"), &exp.teacher.params)?;
            eprintln!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
