//! Scenario runner for the qkdsim network simulator.
//!
//! A scenario is a topology plus an ordered script of QKD sessions, relays,
//! handshakes, records and fault injections. [`run`] executes it under a run
//! seed and produces a [`Report`]; [`stats::summarize`] turns a report into
//! tables.

pub mod report;
mod runner;
pub mod scenario;
pub mod stats;

pub use qkdsim_core as core;
pub use report::{Report, Section};
pub use runner::{run, RunOptions, RunOutput};
pub use scenario::Scenario;

use std::path::Path;

use qkdsim_core::Result;

/// Loads, runs and writes `report.txt` into `out_dir`.
pub fn run_file(path: &Path, seed: u64, out_dir: &Path, transcripts: bool) -> Result<RunOutput> {
    let scenario = Scenario::load(path)?;
    let opts = RunOptions {
        seed,
        transcripts: transcripts.then(|| out_dir.join("transcripts")),
    };
    let out = run(&scenario, &opts)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.txt"), out.report.to_string())?;
    Ok(out)
}
