use std::path::PathBuf;

use qrd_core::generate_dataset;
use qrd_core::synth::{save_dataset, sidecar_path};

use crate::cli::GenArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

pub fn run(args: &GenArgs) -> CliResult<()> {
    let mut cfg = args.common.load()?;
    let d = &mut cfg.device;
    d.seed = args.common.seed.or(d.seed);
    d.preset = args.preset.clone().or(d.preset.take());
    d.qubits = args.qubits.or(d.qubits);
    d.shots_per_state = args.shots_per_state.or(d.shots_per_state);
    d.n_samples = args.samples.or(d.n_samples);
    d.noise_sigma = args.noise.or(d.noise_sigma);
    d.file = args.device.clone().or(d.file.take());
    let device = cfg.device()?;
    let spp = cfg.shots_per_state()?;

    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        super::create_dir(parent)?;
    }
    let ds = generate_dataset(&device, spp)?;
    save_dataset(&args.out, &ds).map_err(|e| CliError::Runtime(format!("{}: {e}", args.out.display())))?;

    let mut manifest = Manifest::new("gen", &serde_json::json!({ "run": cfg, "device": device, "shots_per_state": spp }));
    manifest.output(&args.out)?;
    manifest.output(&sidecar_path(&args.out))?;
    let mut mpath = args.out.clone().into_os_string();
    mpath.push(".manifest.json");
    manifest.write(&PathBuf::from(mpath))?;

    println!(
        "wrote {} shots ({} per state, {} qubits, seed {}) to {}",
        ds.shots.len(),
        spp,
        device.n_qubits(),
        device.seed,
        args.out.display()
    );
    let snr: Vec<String> = device.snr_summary().iter().map(|s| format!("{s:.3}")).collect();
    println!("integrated SNR per qubit: {}", snr.join(" "));
    Ok(())
}
