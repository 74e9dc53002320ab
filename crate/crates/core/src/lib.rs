//! Multiplexed qubit-readout discrimination: signal synthesis, quantized
//! neural discriminators, classical baselines, fidelity metrics and a
//! hardware cost model.

pub mod binio;
pub mod classical;
pub mod error;
pub mod hwsim;
pub mod metrics;
pub mod qnn;
pub mod quant;
pub mod synth;

pub use error::{Error, Result};
pub use metrics::{fidelity, FidelityReport, QubitCounts};
pub use quant::{QuantSpec, QuantizedTensor, Signedness};
pub use synth::{generate_dataset, generate_shot, Dataset, DeviceConfig, QubitConfig, RawShot};
