//! Pipeline harness: generate the testbed, train the models, run the attack
//! sweep and emit the comparison reports — one declarative config, seeded
//! end to end.

mod config;
mod run;

use clap::{Parser, Subcommand};
use config::RunConfig;
use mtadv::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

const EXIT_CONFIG: u8 = 2;
const EXIT_GATE: u8 = 3;
const EXIT_PARTIAL_ATTACKS: u8 = 4;

#[derive(Parser)]
#[command(
    name = "mtadv",
    about = "Staged L-inf adversarial attacks against a toy vision-language testbed",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-sample parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Replace existing artifacts instead of refusing.
    #[arg(long, global = true)]
    overwrite: bool,

    /// Skip attack samples whose artifacts already exist.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Generate,
    /// Train the contrastive model and the dense-task models (gated).
    Train,
    /// Run the attack sweep and persist per-sample artifacts.
    Attack,
    /// Evaluate persisted attacks and emit CSV/JSON tables and triptychs.
    Report,
    /// generate + train + attack + report.
    All,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Attack => "attack",
            Command::Report => "report",
            Command::All => "all",
        }
    }
}

fn error_exit(kind: &str, code: u8, message: &str) -> ExitCode {
    eprintln!("error[{kind}]: {message}");
    ExitCode::from(code)
}

fn classify(e: &Error) -> (&'static str, u8) {
    match e {
        Error::GateFailure { .. } => ("gate_failure", EXIT_GATE),
        Error::InvalidArgument(_) | Error::InvalidSpec { .. } => ("config", EXIT_CONFIG),
        Error::MissingArtifact(_) => ("missing_artifact", EXIT_CONFIG),
        _ => ("internal", 1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            return error_exit("config", EXIT_CONFIG, &format!("worker pool: {e}"));
        }
    }

    let mut config = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => return error_exit("config", EXIT_CONFIG, &e.to_string()),
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Err(e) = config.validate() {
        return error_exit("config", EXIT_CONFIG, &e.to_string());
    }

    let started = Instant::now();
    let outcome = match &cli.command {
        Command::Generate => run::cmd_generate(&config, cli.overwrite).map(|a| (a, 0usize)),
        Command::Train => run::cmd_train(&config, cli.overwrite).map(|a| (a, 0)),
        Command::Attack => run::cmd_attack(&config, cli.overwrite, cli.resume)
            .map(|(a, status)| (a, status.hard_failures)),
        Command::Report => run::cmd_report(&config).map(|(a, _)| (a, 0)),
        Command::All => run::cmd_all(&config, cli.overwrite, cli.resume)
            .map(|o| (o.artifacts, o.attack_status.hard_failures)),
    };

    match outcome {
        Ok((artifacts, hard_failures)) => {
            if let Err(e) =
                run::write_run_record(&config, cli.command.name(), &artifacts, started)
            {
                let (kind, code) = classify(&e);
                return error_exit(kind, code, &e.to_string());
            }
            println!(
                "{} finished in {:.1}s",
                cli.command.name(),
                started.elapsed().as_secs_f64()
            );
            if hard_failures > 0 {
                return error_exit(
                    "partial_attack_failures",
                    EXIT_PARTIAL_ATTACKS,
                    &format!("{hard_failures} attack samples failed; reports cover the rest"),
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, code) = classify(&e);
            error_exit(kind, code, &e.to_string())
        }
    }
}
