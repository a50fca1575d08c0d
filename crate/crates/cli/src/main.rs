use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ensemble_cli::examples::EXAMPLES;
use ensemble_cli::{apply_overrides, emit_plotdata, parse_scenario, run_scenario};

#[derive(Parser)]
#[command(
    name = "ensemble",
    version,
    about = "Broadcast control synthesis for sampled ensembles"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its artifacts.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Iteration counts at which to save the iterate, e.g. 100,1000,10000.
        #[arg(long, value_delimiter = ',')]
        checkpoint_iters: Option<Vec<usize>>,
        /// Write one trace row every k iterations.
        #[arg(long, value_name = "K")]
        trace_every: Option<usize>,
        /// Also write plot-ready CSV bundles.
        #[arg(long)]
        plotdata: bool,
    },
    /// Check a scenario file and report every problem.
    Validate { scenario: PathBuf },
    /// List the shipped example scenarios.
    ListExamples {
        /// Write the example files into this directory.
        #[arg(long, value_name = "DIR")]
        write: Option<PathBuf>,
    },
    /// Turn the artifacts of a finished run into per-figure CSV bundles.
    Plotdata { dir: PathBuf },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
}

fn execute(command: Command) -> Result<u8> {
    match command {
        Command::Run {
            scenario,
            output_dir,
            checkpoint_iters,
            trace_every,
            plotdata,
        } => {
            let mut s = parse_scenario(&scenario)?;
            apply_overrides(&mut s, output_dir, checkpoint_iters, trace_every)?;
            let outcome = run_scenario(&s)?;
            if plotdata {
                emit_plotdata(&outcome.artifacts.dir)?;
            }
            let sm = &outcome.summary;
            println!("{}: {}", sm.name, sm.status);
            if let Some(r) = &sm.result {
                println!(
                    "  iterations {}  max terminal error {:.3e}",
                    r.iterations, r.max_terminal_error
                );
            }
            for e in &sm.sweep {
                println!(
                    "  bound {:>8}  {}  max terminal error {:.3e}",
                    e.bound, e.result.classification, e.result.max_terminal_error
                );
            }
            println!("  artifacts in {}", outcome.artifacts.dir.display());
            if outcome.exit_code() == 1 {
                eprintln!("error: the iteration diverged");
            }
            Ok(outcome.exit_code() as u8)
        }
        Command::Validate { scenario } => {
            let s = parse_scenario(&scenario)?;
            println!(
                "{}: ok ({}, {} samples, solver {})",
                s.name,
                s.family.name(),
                s.params.count,
                s.solver.kind.name()
            );
            Ok(0)
        }
        Command::ListExamples { write } => {
            for e in EXAMPLES {
                println!("{:<18} {}", e.name, e.description);
            }
            if let Some(dir) = write {
                std::fs::create_dir_all(&dir)
                    .with_context(|| format!("cannot create {}", dir.display()))?;
                for e in EXAMPLES {
                    let p = dir.join(e.file_name());
                    if p.exists() {
                        bail!("{} already exists", p.display());
                    }
                    std::fs::write(&p, e.text)?;
                }
            }
            Ok(0)
        }
        Command::Plotdata { dir } => {
            for p in emit_plotdata(&dir)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
