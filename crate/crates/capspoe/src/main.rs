use std::path::PathBuf;
use std::process::ExitCode;

use capspoe::config::RunConfig;
use capspoe::pipeline::{
    cmd_diagram, cmd_generate, cmd_train_autoencoder, cmd_train_capsules, cmd_verify, RunOptions,
};
use capspoe::{Error, Result};
use capspoe_core::oracles::{Fault, SuiteSize};
use clap::{Parser, Subcommand, ValueEnum};

/// Capsule networks trained as a product of expert neurons.
#[derive(Debug, Parser)]
#[command(name = "capspoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; required for every command except `verify`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory in the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory the dataset path is resolved against.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the convolutional autoencoder.
    TrainAutoencoder {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train the capsule layer on the frozen encoder's features.
    TrainCapsules {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Sample images from every hidden capsule into one grid.
    Generate,
    /// Draw the routing coefficients for one sample as SVG.
    Diagram,
    /// Check the energy model against brute-force enumeration.
    Verify {
        #[arg(long, value_enum, hide = true, default_value = "none")]
        inject_fault: InjectFault,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InjectFault {
    None,
    CorruptGradient,
}

const DEFAULT_VERIFY_SEED: u64 = 2024;

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Input("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let opts = |resume| RunOptions {
        data_dir: cli.data_dir.clone(),
        resume,
    };
    match &cli.command {
        Command::TrainAutoencoder { resume } => {
            let cfg = load_config(cli)?;
            let run = cmd_train_autoencoder(&cfg, &opts(*resume))?;
            println!("wrote {}", run.checkpoint.display());
        }
        Command::TrainCapsules { resume } => {
            let cfg = load_config(cli)?;
            let run = cmd_train_capsules(&cfg, &opts(*resume))?;
            println!(
                "wrote {} ({} x {} -> {} x {})",
                run.checkpoint.display(),
                run.lower.count,
                run.lower.dim,
                run.upper.count,
                run.upper.dim
            );
        }
        Command::Generate => {
            let cfg = load_config(cli)?;
            let run = cmd_generate(&cfg)?;
            println!("wrote {} ({} x {} grid)", run.path.display(), run.rows, run.cols);
        }
        Command::Diagram => {
            let cfg = load_config(cli)?;
            let run = cmd_diagram(&cfg, &opts(false))?;
            println!("wrote {}", run.path.display());
        }
        Command::Verify { inject_fault } => {
            let cfg = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
            let seed = cli
                .seed
                .or(cfg.as_ref().map(|c| c.seed))
                .unwrap_or(DEFAULT_VERIFY_SEED);
            let out = cli
                .out
                .clone()
                .or(cfg.map(|c| c.out_dir))
                .unwrap_or_else(|| PathBuf::from("."));
            let fault = match inject_fault {
                InjectFault::None => Fault::None,
                InjectFault::CorruptGradient => Fault::CorruptGradient,
            };
            cmd_verify(seed, &out, SuiteSize::default(), fault)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
