use qrd_core::hwsim::{check_equivalence, compile_thresholds, estimate_latency, mac_count, write_qtn};
use qrd_core::qnn::{read_model, ArchSpec};
use qrd_core::synth::boxcar_features;

use super::{create_dir, emit, load_dataset, write_with, DataInfo};
use crate::cli::HwsimArgs;
use crate::error::{io_at, CliError, CliResult};
use crate::manifest::{manifest_in, Manifest};

pub const LATENCY_CSV: &str = "latency.csv";
pub const LATENCY_JSON: &str = "latency.json";
pub const MACS_JSON: &str = "macs.json";
pub const FOLDING_JSON: &str = "folding.json";
pub const NETWORK_FILE: &str = "network.qtn";
pub const EQUIVALENCE_JSON: &str = "equivalence.json";

pub fn run(args: &HwsimArgs) -> CliResult<()> {
    let mut cfg = args.common.load()?;
    let h = &mut cfg.hwsim;
    h.overlap = args.overlap.or(h.overlap);
    h.clock_mhz = args.clock_mhz.or(h.clock_mhz);
    h.overhead_cycles = args.overhead.or(h.overhead_cycles);
    if !args.pe_cap.is_empty() {
        h.pe_caps = Some(args.pe_cap.clone());
    }
    if !args.simd_cap.is_empty() {
        h.simd_caps = Some(args.simd_cap.clone());
    }

    let model = match &args.model {
        Some(p) => {
            let mut r = std::io::BufReader::new(std::fs::File::open(p).map_err(io_at(p))?);
            Some(read_model(&mut r).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let arch: ArchSpec = match (&model, &args.arch) {
        (Some(m), _) => m.arch.clone(),
        (None, Some(name)) => ArchSpec::preset(name, args.qubits).map_err(|e| CliError::Config(e.to_string()))?,
        (None, None) => unreachable!("clap requires --model or --arch"),
    };
    let folding = cfg.folding(&arch)?;
    let data = args.data.as_deref().map(load_dataset).transpose()?;

    create_dir(&args.out_dir)?;
    let dir = &args.out_dir;
    let mut record = serde_json::json!({ "run": cfg, "arch": arch, "folding": folding });
    let mut manifest = Manifest::new("hwsim", &());

    let latency = estimate_latency(&arch, &folding)?;
    emit(&mut manifest, &dir.join(LATENCY_CSV), latency.to_csv())?;
    emit(&mut manifest, &dir.join(LATENCY_JSON), latency.to_json() + "\n")?;
    emit(&mut manifest, &dir.join(MACS_JSON), serde_json::to_string_pretty(&mac_count(&arch)?).expect("plain data") + "\n")?;
    emit(&mut manifest, &dir.join(FOLDING_JSON), serde_json::to_string_pretty(&folding).expect("plain data") + "\n")?;
    println!("latency: {} cycles, {:.1} ns at {} MHz", latency.total_cycles, latency.total_ns, latency.clock_mhz);

    let mut failure = None;
    if let Some(model) = &model {
        let tn = compile_thresholds(model)?;
        write_with(&mut manifest, &dir.join(NETWORK_FILE), |b| write_qtn(b, &tn))?;
        if let (Some(ds), Some(path)) = (&data, &args.data) {
            if ds.n_qubits() != arch.n_outputs() {
                return Err(CliError::Runtime(format!("model has {} outputs, dataset {} qubits", arch.n_outputs(), ds.n_qubits())));
            }
            let x = boxcar_features(&ds.shots, model.boxcar_window)?;
            let eq = check_equivalence(model, &tn, x.view())?;
            emit(&mut manifest, &dir.join(EQUIVALENCE_JSON), serde_json::to_string_pretty(&eq).expect("plain data") + "\n")?;
            record["data"] = serde_json::to_value(DataInfo::of(path, ds)).expect("plain data");
            if eq.passed() {
                println!("equivalence: {} shots, 0 mismatches", eq.n_checked);
            } else {
                let first = eq.first_mismatch.map_or("unknown".into(), |i| i.to_string());
                failure = Some(CliError::Equivalence(format!(
                    "{} of {} shots differ; first differing shot index {first}",
                    eq.mismatches, eq.n_checked
                )));
            }
        }
    }

    let mut full = Manifest::new("hwsim", &record);
    for p in args.model.iter().chain(args.data.iter()) {
        full.input(p)?;
    }
    full.outputs = manifest.outputs;
    full.write(&manifest_in(dir))?;
    failure.map_or(Ok(()), Err)
}
