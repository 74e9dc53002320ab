mod eval;
mod gen;
mod hwsim;
mod report;
mod sweep;
mod train;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use qrd_core::{Dataset, FidelityReport, RawShot};

use crate::cli::Command;
use crate::error::{io_at, CliError, CliResult};
use crate::manifest::Manifest;

pub use eval::EvalSummary;
pub use sweep::{SweepAxis, SWEEP_FILE, SWEEP_SUMMARY_FILE};

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Gen(a) => gen::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Sweep(a) => sweep::run(&a),
        Command::Hwsim(a) => hwsim::run(&a),
        Command::Report(a) => report::run(&a),
    }
}

pub(crate) fn load_dataset(path: &Path) -> CliResult<Dataset> {
    qrd_core::synth::load_dataset(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub(crate) fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))
}

/// Writes `bytes` to `path` and records it in the manifest.
pub(crate) fn emit(manifest: &mut Manifest, path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(io_at(path))?;
    manifest.output(path)
}

pub(crate) fn write_with<F>(manifest: &mut Manifest, path: &Path, f: F) -> CliResult<()>
where
    F: FnOnce(&mut Vec<u8>) -> qrd_core::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    emit(manifest, path, buf)
}

/// Applies a per-shot discriminator to every shot, in parallel.
pub(crate) fn predict_all<F>(shots: &[RawShot], f: F) -> CliResult<Vec<u32>>
where
    F: Fn(&RawShot) -> qrd_core::Result<u32> + Sync + Send,
{
    Ok(shots.par_iter().map(f).collect::<qrd_core::Result<Vec<u32>>>()?)
}

/// Rejects a held-out set drawn with the training seed.
pub(crate) fn check_seeds(train_seed: u64, test_seed: u64, allow_same: bool) -> CliResult<()> {
    if train_seed == test_seed && !allow_same {
        return Err(CliError::Config(format!(
            "held-out dataset uses the training dataset seed {test_seed}; regenerate it with another seed or pass --allow-same-seed"
        )));
    }
    Ok(())
}

/// Dataset identity recorded in manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct DataInfo {
    pub path: String,
    pub seed: u64,
    pub n_qubits: usize,
    pub n_shots: usize,
}

impl DataInfo {
    pub fn of(path: &Path, ds: &Dataset) -> Self {
        Self { path: path.display().to_string(), seed: ds.device.seed, n_qubits: ds.n_qubits(), n_shots: ds.shots.len() }
    }
}

pub(crate) fn format_fidelities(r: &FidelityReport) -> String {
    r.fidelity.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>().join(" ")
}
