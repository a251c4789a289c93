//! `lobit` drives the quantization pipeline stage by stage. Commands read
//! one text config, write their artifacts into the run directory, and are
//! byte-reproducible for a fixed seed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lobit_core::config::{default_config, RunConfig};
use lobit_core::pipeline;
use lobit_core::{Error, Result};

#[derive(Parser)]
#[command(name = "lobit", version, about = "mixed-precision quantization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file
    #[arg(long)]
    config: PathBuf,
    /// Override the root seed from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the sensitivity scan
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override the output directory from the config
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration
    InitConfig,
    /// Train the full-precision teacher
    TrainTeacher(Common),
    /// Measure per-layer low-bit sensitivity
    Scan(Common),
    /// Turn scan records into a per-layer bit recipe
    Plan(Common),
    /// Stage one: quantization-aware distillation against the teacher
    Qat(Common),
    /// Stage two: noise-prediction fine-tuning
    Finetune(Common),
    /// Pack the trained student into a .bfq container
    Pack(Common),
    /// Generate points from the packed model
    Sample(Common),
    /// Compare student and teacher across guidance scales
    Eval(Common),
}

fn load(common: &Common) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", common.config.display())))?;
    let mut cfg = RunConfig::from_text(&text)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig => {
            print!("{}", default_config().to_text());
            Ok(())
        }
        Command::TrainTeacher(c) => pipeline::cmd_train_teacher(&load(&c)?),
        Command::Scan(c) => pipeline::cmd_scan(&load(&c)?, c.jobs),
        Command::Plan(c) => pipeline::cmd_plan(&load(&c)?),
        Command::Qat(c) => pipeline::cmd_qat(&load(&c)?),
        Command::Finetune(c) => pipeline::cmd_finetune(&load(&c)?),
        Command::Pack(c) => pipeline::cmd_pack(&load(&c)?),
        Command::Sample(c) => pipeline::cmd_sample(&load(&c)?),
        Command::Eval(c) => pipeline::cmd_eval(&load(&c)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
