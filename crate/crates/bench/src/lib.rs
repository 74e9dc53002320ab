//! Benchmark fixtures: a reduced five-qubit dataset and untrained models
//! sized like the deployed ones.

use qrd_core::classical::{MatchedFilterBank, SvmBank, SvmConfig};
use qrd_core::hwsim::{compile_thresholds, ThresholdNetwork};
use qrd_core::qnn::{build_model, ArchSpec, QnnModel};
use qrd_core::quant::QuantSpec;
use qrd_core::{generate_dataset, Dataset, DeviceConfig};

pub const WINDOW: usize = 2;

/// Five-qubit preset with `shots_per_state` shots of every basis state.
pub fn dataset(shots_per_state: usize) -> Dataset {
    generate_dataset(&DeviceConfig::paper5q(1), shots_per_state).expect("preset is valid")
}

/// Freshly initialized model for an architecture preset.
pub fn qnn(arch: &str) -> QnnModel {
    let arch = ArchSpec::preset(arch, 5).expect("known preset");
    let mut m = build_model(&arch, 0).expect("preset builds");
    m.input_spec = QuantSpec::new(arch.input_bits, arch.input_signedness, 0.05).expect("valid spec");
    m
}

pub fn threshold_network(model: &QnnModel) -> ThresholdNetwork {
    compile_thresholds(model).expect("quantized model compiles")
}

pub fn matched_filters(ds: &Dataset) -> MatchedFilterBank {
    MatchedFilterBank::train(&ds.shots, ds.n_qubits()).expect("both classes present")
}

pub fn svms(ds: &Dataset) -> SvmBank {
    SvmBank::train(&ds.shots, ds.n_qubits(), &SvmConfig { epochs: 2, ..SvmConfig::default() }).expect("both classes present")
}
