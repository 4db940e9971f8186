use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use newtonflow::cli::{self, exit};
use newtonflow::config::load_config;
use newtonflow::{verify, Error, Result};

#[derive(Parser)]
#[command(name = "newtonflow", version, about = "Heat flows with a Newtonian nonlocal term on a box")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one configuration, writing CSV diagnostics and checkpoints.
    Run {
        config: PathBuf,
        /// Continue from this checkpoint instead of the configured initial data.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured CSV path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a self-check suite: potential, gradient, dissipation, semiflow or lab.
    Verify { suite: String },
    /// Bracket the initial amplitude at which runs stop reaching the final time.
    Sweep {
        config: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        amp_lo: f64,
        #[arg(long, allow_negative_numbers = true)]
        amp_hi: f64,
        #[arg(long)]
        tol: f64,
    },
    /// Exact exponent calculus and ratio ensembles from a lab spec file.
    Lab { spec: PathBuf },
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("NEWTONFLOW_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("NEWTONFLOW_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Run { config, resume, output } => {
            let mut cfg = load_config(&config)?;
            if resume.is_some() {
                cfg.resume = resume;
            }
            if let Some(o) = output {
                cfg.output = o;
            }
            let outcome = cli::run_config(&cfg)?;
            let t = &outcome.trajectory;
            eprintln!(
                "{:?} at t = {:.6e} after {} steps; {} records written to {}",
                t.exit,
                t.t_final,
                t.final_state.step_count,
                t.records.len(),
                cfg.output.display()
            );
            Ok(outcome.exit_code())
        }
        Command::Verify { suite } => {
            let checks = verify::run_suite(&suite)?;
            for c in &checks {
                println!("{c}");
            }
            Ok(if checks.iter().all(|c| c.passed()) { exit::OK } else { exit::CHECK_FAILED })
        }
        Command::Sweep { config, amp_lo, amp_hi, tol } => {
            let cfg = load_config(&config)?;
            let report = cli::sweep(&cfg, amp_lo, amp_hi, tol)?;
            print!("{}", cli::format_sweep(&report));
            Ok(exit::OK)
        }
        Command::Lab { spec } => {
            let text = std::fs::read_to_string(&spec)?;
            let mut parsed = cli::parse_lab_spec(&text)?;
            if let (Some(csv), Some(dir)) = (parsed.csv.as_mut(), spec.parent()) {
                if csv.is_relative() {
                    *csv = dir.join(&*csv);
                }
            }
            cli::run_lab(&parsed, &mut std::io::stdout().lock())?;
            Ok(exit::OK)
        }
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = configure_threads().and_then(|()| dispatch(args.command)).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        cli::error_exit_code(&e)
    });
    ExitCode::from(code as u8)
}
