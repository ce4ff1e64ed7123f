use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

/// Deterministic QKD network simulator.
#[derive(Parser)]
#[command(name = "qkdsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write report.txt into the output directory.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write per-session wire transcripts under <out>/transcripts.
        #[arg(long)]
        transcripts: bool,
    },
    /// Print a summary table for a report.
    Stats { report: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QKDSIM_LOG", "warn")).init();
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Cmd::Run { scenario, seed, out, transcripts } => {
            let result = qkdsim::run_file(&scenario, seed, &out, transcripts)
                .with_context(|| format!("running {}", scenario.display()))?;
            for &i in &result.failed_steps {
                let s = result.report.section("step", Some(&i.to_string()));
                let line = s.and_then(|s| s.get("line")).unwrap_or("?");
                let why = s.and_then(|s| s.get("error")).unwrap_or("unexpected success");
                eprintln!("step {i} (line {line}) failed: {why}");
            }
            println!("report written to {}", out.join("report.txt").display());
            Ok(if result.success() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Stats { report } => {
            let text = qkdsim::stats::summarize_file(&report)
                .with_context(|| format!("reading {}", report.display()))?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
    }
}
