use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spde_lab::config::RunConfig;
use spde_lab::runner::{self, Command};
use spde_lab::LabError;

#[derive(Parser)]
#[command(name = "spde-lab", version, about = "Numerical experiments for semilinear SPDEs with singular drift")]
struct Cli {
    /// JSON configuration file; `SPDE_LAB__section__key` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for the run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Size of the worker pool (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample paths of the mild scheme.
    Simulate,
    /// Solve for the regularizing transform.
    SolveU,
    /// Compare the Bismut gradient with finite differences.
    Bismut,
    /// Representation residual under time refinement.
    Representation,
    /// Coupled paths from nearby starting points.
    Uniqueness,
    /// Galerkin truncation errors of the transformed equation.
    Galerkin,
    /// Girsanov-weighted expectations against direct simulation.
    Girsanov,
    /// Gap of the semigroup on an indicator as the starting points merge.
    StrongFeller,
    /// Composed Harnack inequality.
    Harnack,
    /// Functional-inequality suite, optionally with the full acceptance criteria.
    VerifyAll {
        #[arg(long)]
        full: bool,
    },
    /// Re-run a recorded run and compare outputs byte for byte.
    Replay { manifest: PathBuf },
    /// Print the effective configuration as JSON.
    PrintConfig,
}

fn exit_code(err: &LabError) -> u8 {
    match err {
        LabError::Config(_) | LabError::Json(_) => 2,
        _ => 1,
    }
}

fn load(cli: &Cli) -> Result<RunConfig, LabError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<bool, LabError> {
    let (command, full) = match &cli.command {
        Cmd::PrintConfig => {
            println!("{}", serde_json::to_string_pretty(&load(cli)?)?);
            return Ok(true);
        }
        Cmd::Replay { manifest } => {
            let report = runner::replay(manifest)?;
            if !cli.quiet {
                match &report.first_divergence {
                    None => println!("replay identical"),
                    Some(file) => {
                        println!("first divergence: {file}");
                        for line in &report.parameter_diff {
                            println!("  {line}");
                        }
                    }
                }
            }
            return Ok(report.identical);
        }
        Cmd::Simulate => (Command::Simulate, false),
        Cmd::SolveU => (Command::SolveU, false),
        Cmd::Bismut => (Command::Bismut, false),
        Cmd::Representation => (Command::Representation, false),
        Cmd::Uniqueness => (Command::Uniqueness, false),
        Cmd::Galerkin => (Command::Galerkin, false),
        Cmd::Girsanov => (Command::Girsanov, false),
        Cmd::StrongFeller => (Command::StrongFeller, false),
        Cmd::Harnack => (Command::Harnack, false),
        Cmd::VerifyAll { full } => (Command::VerifyAll, *full),
    };
    let cfg = load(cli)?;
    let manifest = runner::run(command, &cfg, full)?;
    if !cli.quiet {
        let status = if manifest.passed { "ok" } else { "FAILED" };
        println!("{status}: {} ({:.1} s) -> {}", manifest.summary, manifest.wall_clock_seconds, cfg.out.display());
    }
    Ok(manifest.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
