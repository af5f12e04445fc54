use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use poreflow::pipeline::{self, Ablation, RunConfig};
use poreflow::Error;

#[derive(Parser)]
#[command(name = "poreflow", version, about = "Coupled particle-graph / U-Net pore-scale flow surrogate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory holding every input and output of the pipeline.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic drainage scenario.
    Synth(Common),
    /// Smooth the observed tracks.
    Preprocess(Common),
    /// Train the particle velocity model.
    TrainGns {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "none")]
        ablation: Ablation,
    },
    /// Train the interface model.
    TrainUnet {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "none")]
        ablation: Ablation,
    },
    /// Roll both models forward over the held-out frames.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "none")]
        ablation: Ablation,
    },
    /// Score a rollout against the ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "none")]
        ablation: Ablation,
    },
    /// Retrain, roll out and score both ablated variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn load_config(common: &Common) -> poreflow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Config(_) => 3,
        _ => 1,
    }
}

fn print<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serialisable"));
}

fn run(cli: Cli) -> poreflow::Result<()> {
    let dir = |c: &Common| -> PathBuf { c.out.clone() };
    match cli.command {
        Command::Synth(c) => print(&pipeline::synth(&load_config(&c)?, &dir(&c))?),
        Command::Preprocess(c) => print(&pipeline::preprocess(&load_config(&c)?, &dir(&c))?),
        Command::TrainGns { common, ablation } => {
            print(&pipeline::train_gns(&load_config(&common)?, &dir(&common), ablation)?)
        }
        Command::TrainUnet { common, ablation } => {
            print(&pipeline::train_unet(&load_config(&common)?, &dir(&common), ablation)?)
        }
        Command::Rollout { common, steps, ablation } => {
            print(&pipeline::rollout_stage(&load_config(&common)?, &dir(&common), steps, ablation)?)
        }
        Command::Eval { common, ablation } => print(&pipeline::eval(&load_config(&common)?, &dir(&common), ablation)?),
        Command::Ablate { common, steps } => print(&pipeline::ablate(&load_config(&common)?, &dir(&common), steps)?),
    }
    Ok(())
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("POREFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| format!("POREFLOW_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(3);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

