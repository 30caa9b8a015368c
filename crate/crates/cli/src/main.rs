use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swaptrain::training::Regime;
use swaptrain::Result;
use swaptrain_cli::config::ExperimentConfig;
use swaptrain_cli::{commands, exit_code, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "swaptrain", version, about = "Train image estimators from paired measurements without ground truth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for data generation.
    #[arg(long)]
    threads: Option<usize>,
    /// Training regime override: supervised, unsup-nonblind or unsup-blind.
    #[arg(long)]
    regime: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired-measurement dataset.
    GenData(Common),
    /// Train an estimator on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of a previous run to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the dataset's evaluation set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Eigen-spectrum and rank of Q for the configured measurements.
    AnalyzeQ(Common),
    /// Monte-Carlo checks of the expected swap-loss identity.
    VerifyTheory(Common),
    /// Reconstruct a single PGM image.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn resolve(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    if let Some(r) = &c.regime {
        cfg.regime = Regime::parse(r)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::GenData(c) => commands::gen_data(&resolve(&c)?),
        Command::Train { common, resume } => {
            let cfg = resolve(&common)?;
            eprintln!("training {}", commands::describe(&cfg));
            commands::train(&cfg, resume.as_deref())
        }
        Command::Eval { common, checkpoint } => commands::eval(&resolve(&common)?, &checkpoint),
        Command::AnalyzeQ(c) => commands::analyze_q(&resolve(&c)?),
        Command::VerifyTheory(c) => commands::verify_theory(&resolve(&c)?),
        Command::Reconstruct {
            common,
            checkpoint,
            input,
            output,
        } => commands::reconstruct(&resolve(&common)?, &checkpoint, &input, &output),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
