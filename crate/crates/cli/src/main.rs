//! Batch driver: `mvsde <command> [--config FILE] [overrides]`.
//!
//! Exit status 0 when the run succeeds and its checks pass, 1 when a study
//! ran but a check failed, 2 when the program could not finish (bad
//! configuration, divergence, I/O).

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mvsde::Scheme;

use crate::commands::Artifacts;
use crate::config::{Command, FileConfig, ModelSpec, RunConfig};
use crate::error::CliError;
use crate::output::RunDir;

#[derive(Debug, Parser)]
#[command(name = "mvsde", version, about = "McKean-Vlasov particle simulations and studies")]
struct Cli {
    #[arg(value_enum)]
    command: Command,

    /// JSON config; flags override its keys
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed [default: 42]
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,

    /// Parent of the run directory [default: results]
    #[arg(long, value_name = "PATH")]
    outdir: Option<PathBuf>,

    /// Worker threads; never changes the results
    #[arg(long, value_name = "K")]
    threads: Option<usize>,

    /// Particle counts, comma separated, strictly increasing
    #[arg(long = "N-list", value_name = "N,N,...", value_delimiter = ',')]
    n_list: Option<Vec<usize>>,

    /// Time step; the step count becomes round(T/dt)
    #[arg(long, value_name = "DT")]
    dt: Option<f64>,

    /// Horizon
    #[arg(long = "T", value_name = "T")]
    horizon: Option<f64>,

    /// Independent repetitions per N
    #[arg(long, value_name = "R")]
    reps: Option<usize>,

    /// NAME or NAME:key=value,...; unspecified parameters take defaults
    #[arg(long, value_name = "SPEC")]
    model: Option<String>,

    /// EM or TamedEM [default: from the model's regularity]
    #[arg(long, value_name = "SCHEME", value_parser = parse_scheme)]
    scheme: Option<Scheme>,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown scheme \"{s}\"; expected EM or TamedEM"))
}

impl Cli {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let flags = FileConfig {
            model: self.model.as_deref().map(ModelSpec::parse).transpose()?,
            horizon: self.horizon,
            dt: self.dt,
            n_list: self.n_list,
            reps: self.reps,
            seed: self.seed,
            scheme: self.scheme,
            outdir: self.outdir,
            threads: self.threads,
            ..FileConfig::default()
        };
        RunConfig::resolve(self.command, file, flags)
    }
}

fn report(cfg: &RunConfig, dir: &RunDir, artifacts: &Artifacts) -> Result<(), CliError> {
    dir.write("results.csv", &artifacts.csv)?;
    dir.write("results.dat", &artifacts.dat)?;
    let mut meta = artifacts.meta.clone();
    meta["config"] = serde_json::to_value(cfg).expect("config serialises");
    meta["seed"] = cfg.seed.into();
    dir.write_json("meta.json", &meta)?;
    for line in &artifacts.summary {
        println!("  {line}");
    }
    Ok(())
}

fn execute(cfg: &RunConfig) -> Result<ExitCode, CliError> {
    if let Some(k) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot size the thread pool: {e}")))?;
    }
    let dir = RunDir::create(&cfg.outdir, cfg.command.name())?;
    dir.write_json("config.json", cfg)?;
    println!("{} → {}", cfg.command, dir.path().display());
    match commands::run(cfg) {
        Ok(artifacts) => {
            report(cfg, &dir, &artifacts)?;
            if artifacts.passed {
                println!("{}: passed", cfg.command);
                Ok(ExitCode::SUCCESS)
            } else {
                println!("{}: checks failed", cfg.command);
                Ok(ExitCode::from(1))
            }
        }
        Err(aborted) => {
            if let Some(mut partial) = aborted.partial {
                partial.meta["error"] = aborted.error.to_string().into();
                report(cfg, &dir, &partial)?;
            } else {
                let meta = serde_json::json!({
                    "command": cfg.command,
                    "seed": cfg.seed,
                    "config": cfg,
                    "versions": commands::versions(),
                    "error": aborted.error.to_string(),
                    "passed": false,
                });
                dir.write_json("meta.json", &meta)?;
            }
            Err(CliError::Run(aborted.error))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = cli.resolve().and_then(|cfg| execute(&cfg));
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mvsde: {e}");
            ExitCode::from(2)
        }
    }
}
