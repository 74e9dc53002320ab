//! Run configuration: one TOML file plus command-line overrides.
//!
//! Every key is optional. Flags given on the command line replace the
//! corresponding file value. Grammar:
//!
//! ```toml
//! seed = 7                      # default for [device].seed and [train].seed
//!
//! [device]
//! preset = "paper5q"            # paper5q | independent
//! qubits = 5                    # keep the first N qubits of the preset
//! shots_per_state = 1000
//! n_samples = 512
//! noise_sigma = 0.95
//! seed = 1
//! file = "device.json"          # full DeviceConfig as JSON; replaces the preset
//!
//! [arch]
//! preset = "arch5"              # arch1..arch9, or give kind + layer_dims
//! kind = "dense"                # dense | segmented | piecewise
//! layer_dims = [512, 64, 5]
//! n_segments = 8
//! piece_len = 64
//! input_bits = 4
//! weight_bits = 2
//! act_bits = 2
//! dropout = 0.1
//!
//! [train]
//! epochs = 50
//! lr0 = 1e-3
//! weight_decay = 1e-3
//! batch_size = 1024
//! val_split = 0.2
//! window = 2                    # boxcar window
//! seed = 0
//!
//! [svm]
//! lambda = 1e-4
//! epochs = 20
//! seed = 0
//! input_percentile = 99.9
//!
//! [sweep]
//! axis = "input_bits"           # input_bits | weight_bits | act_bits | weight_act_bits | hidden_dims | n_params
//! values = ["2", "4", "8"]
//! reps = 3
//!
//! [hwsim]
//! overlap = true
//! clock_mhz = 250.0
//! overhead_cycles = 1
//! pe_caps = [[0, 16]]           # [layer, cap] pairs
//! simd_caps = []
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qrd_core::classical::SvmConfig;
use qrd_core::hwsim::FoldingConfig;
use qrd_core::qnn::{ArchKind, ArchSpec, TrainConfig};
use qrd_core::synth::DEVICE_IF_HZ;
use qrd_core::DeviceConfig;

use crate::error::{config_err, io_at, CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub device: DeviceSection,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub svm: SvmSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub hwsim: HwsimSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub preset: Option<String>,
    pub qubits: Option<usize>,
    pub shots_per_state: Option<usize>,
    pub n_samples: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub seed: Option<u64>,
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub preset: Option<String>,
    pub kind: Option<ArchKind>,
    pub layer_dims: Option<Vec<usize>>,
    pub n_segments: Option<usize>,
    pub piece_len: Option<usize>,
    pub input_bits: Option<u8>,
    pub weight_bits: Option<u8>,
    pub act_bits: Option<u8>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub lr0: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub val_split: Option<f64>,
    pub window: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvmSection {
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub input_percentile: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: Option<String>,
    pub values: Option<Vec<String>>,
    pub reps: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HwsimSection {
    pub overlap: Option<bool>,
    pub clock_mhz: Option<f64>,
    pub overhead_cycles: Option<u64>,
    pub pe_caps: Option<Vec<(usize, usize)>>,
    pub simd_caps: Option<Vec<(usize, usize)>>,
}

pub const DEFAULT_WINDOW: usize = 2;
pub const DEFAULT_SVM_PERCENTILE: f64 = 99.9;

impl RunConfig {
    /// Parses TOML text. Errors carry the line and column.
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    pub fn device(&self) -> CliResult<DeviceConfig> {
        let d = &self.device;
        let seed = d.seed.or(self.seed).unwrap_or(0);
        let mut dev = if let Some(file) = &d.file {
            let text = std::fs::read_to_string(file).map_err(|e| CliError::Config(format!("{}: {e}", file.display())))?;
            serde_json::from_str::<DeviceConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", file.display())))?
        } else {
            match d.preset.as_deref().unwrap_or("paper5q") {
                "paper5q" => DeviceConfig::paper5q(seed),
                "independent" => {
                    let n = d.qubits.unwrap_or(DEVICE_IF_HZ.len());
                    if n == 0 || n > DEVICE_IF_HZ.len() {
                        return config_err(format!("device.qubits = {n}: the independent preset has 1..={} tones", DEVICE_IF_HZ.len()));
                    }
                    DeviceConfig::independent(&DEVICE_IF_HZ[..n], 512, 0.95, seed)
                }
                other => return config_err(format!("device.preset = {other:?}: expected \"paper5q\" or \"independent\"")),
            }
        };
        if let Some(n) = d.qubits {
            dev = first_qubits(dev, n)?;
        }
        if let Some(n) = d.n_samples {
            dev.n_samples = n;
        }
        if let Some(s) = d.noise_sigma {
            dev.noise_sigma = s;
        }
        if d.seed.is_some() || self.seed.is_some() || d.file.is_none() {
            dev.seed = seed;
        }
        dev.validate().map_err(|e| CliError::Config(format!("[device]: {e}")))?;
        Ok(dev)
    }

    pub fn shots_per_state(&self) -> CliResult<usize> {
        match self.device.shots_per_state.unwrap_or(1000) {
            0 => config_err("device.shots_per_state must be at least 1"),
            n => Ok(n),
        }
    }

    /// Architecture with `n_outputs` heads, one per qubit.
    pub fn arch(&self, n_outputs: usize) -> CliResult<ArchSpec> {
        let a = &self.arch;
        let bad = |e: qrd_core::Error| CliError::Config(format!("[arch]: {e}"));
        let mut spec = match (&a.preset, &a.layer_dims) {
            (Some(_), Some(_)) => return config_err("[arch]: give either preset or layer_dims, not both"),
            (None, Some(dims)) => {
                let dims = dims.clone();
                if dims.last() != Some(&n_outputs) {
                    return config_err(format!("arch.layer_dims must end in {n_outputs} outputs (one per qubit), got {dims:?}"));
                }
                let bits = (4, 2, 2);
                match a.kind.unwrap_or(ArchKind::Dense) {
                    ArchKind::Dense => ArchSpec::dense(dims, bits),
                    ArchKind::Segmented => ArchSpec::segmented(dims, a.n_segments.unwrap_or(0), bits),
                    ArchKind::Piecewise => ArchSpec::piecewise(dims, a.piece_len.unwrap_or(0), bits),
                }
            }
            (preset, None) => {
                if a.kind.is_some() || a.n_segments.is_some() || a.piece_len.is_some() {
                    return config_err("[arch]: kind, n_segments and piece_len need layer_dims");
                }
                ArchSpec::preset(preset.as_deref().unwrap_or("arch5"), n_outputs).map_err(bad)?
            }
        };
        let bits =
            (a.input_bits.unwrap_or(spec.input_bits), a.weight_bits.unwrap_or(spec.weight_bits), a.act_bits.unwrap_or(spec.act_bits));
        spec = spec.with_bits(bits.0, bits.1, bits.2);
        if let Some(p) = a.dropout {
            spec.dropout_p = p;
        }
        spec.validate().map_err(bad)?;
        Ok(spec)
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let t = &self.train;
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: t.epochs.unwrap_or(d.epochs),
            lr0: t.lr0.unwrap_or(d.lr0),
            weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            val_split: t.val_split.unwrap_or(d.val_split),
            seed: t.seed.or(self.seed).unwrap_or(d.seed),
            ..d
        };
        cfg.validate().map_err(|e| CliError::Config(format!("[train]: {e}")))?;
        Ok(cfg)
    }

    pub fn window(&self) -> CliResult<usize> {
        match self.train.window.unwrap_or(DEFAULT_WINDOW) {
            0 => config_err("train.window must be at least 1"),
            w => Ok(w),
        }
    }

    pub fn svm_config(&self) -> CliResult<SvmConfig> {
        let s = &self.svm;
        let d = SvmConfig::default();
        let cfg = SvmConfig {
            lambda: s.lambda.unwrap_or(d.lambda),
            epochs: s.epochs.unwrap_or(d.epochs),
            seed: s.seed.or(self.seed).unwrap_or(d.seed),
        };
        if !(cfg.lambda.is_finite() && cfg.lambda > 0.0) || cfg.epochs == 0 {
            return config_err("[svm]: lambda must be positive and epochs at least 1");
        }
        Ok(cfg)
    }

    pub fn svm_percentile(&self) -> CliResult<f64> {
        let p = self.svm.input_percentile.unwrap_or(DEFAULT_SVM_PERCENTILE);
        if !(p > 0.0 && p <= 100.0) {
            return config_err(format!("svm.input_percentile = {p} outside (0, 100]"));
        }
        Ok(p)
    }

    pub fn folding(&self, arch: &ArchSpec) -> CliResult<FoldingConfig> {
        let h = &self.hwsim;
        let mut f = FoldingConfig::fully_parallel(arch).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(o) = h.overlap {
            f.streaming_overlap = o;
        }
        if let Some(c) = h.clock_mhz {
            f.clock_mhz = c;
        }
        if let Some(c) = h.overhead_cycles {
            f.pipeline_overhead_cycles = c;
        }
        let n = f.layers.len();
        for (name, caps) in [("pe_caps", &h.pe_caps), ("simd_caps", &h.simd_caps)] {
            for &(layer, cap) in caps.iter().flatten() {
                if layer >= n || cap == 0 {
                    return config_err(format!("hwsim.{name}: [{layer}, {cap}] needs layer < {n} and cap >= 1"));
                }
                let l = &mut f.layers[layer];
                if name == "pe_caps" {
                    l.pe = l.pe.min(cap);
                } else {
                    l.simd = l.simd.min(cap);
                }
            }
        }
        f.validate(arch).map_err(|e| CliError::Config(format!("[hwsim]: {e}")))?;
        Ok(f)
    }
}

/// Keeps qubits `0..n` with the matching crosstalk block.
fn first_qubits(mut dev: DeviceConfig, n: usize) -> CliResult<DeviceConfig> {
    if n == 0 || n > dev.n_qubits() {
        return config_err(format!("device.qubits = {n}: device has {} qubits", dev.n_qubits()));
    }
    dev.qubits.truncate(n);
    dev.crosstalk.truncate(n);
    for row in &mut dev.crosstalk {
        row.truncate(n);
    }
    Ok(dev)
}

/// Parses `a=b` pairs given on the command line.
pub fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('=').ok_or_else(|| format!("expected LAYER=CAP, got {s:?}"))?;
    Ok((a.trim().parse().map_err(|_| format!("bad layer in {s:?}"))?, b.trim().parse().map_err(|_| format!("bad cap in {s:?}"))?))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}
