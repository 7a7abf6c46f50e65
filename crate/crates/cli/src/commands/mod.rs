pub mod dataset_gen;
pub mod evaluate;
pub mod loop_chain;
pub mod sample;
pub mod train;
pub mod translate;

use std::path::Path;

use crate::config::RunConfig;
use crate::pipeline::{runtime, AppError};

/// Writes the reproduction manifest every sampling-side command emits.
pub fn write_manifest(
    out: &Path,
    config: &RunConfig,
    seed: u64,
    solver: &str,
    steps: usize,
    extra: &[(&str, String)],
) -> Result<(), AppError> {
    let mut text = format!(
        "config_hash = {}\nseed = {seed}\nsolver = {solver}\nsteps = {steps}\n",
        config.hash()
    );
    for (k, v) in extra {
        text.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(out.join("manifest.txt"), text)
        .map_err(|e| runtime(format!("cannot write manifest: {e}")))
}

pub fn solver_name(solver: multidiff_core::sampler::Solver) -> &'static str {
    match solver {
        multidiff_core::sampler::Solver::Ancestral => "ancestral",
        multidiff_core::sampler::Solver::DpmSolverPp2m => "dpmpp",
    }
}
