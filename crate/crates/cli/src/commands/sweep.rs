use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use qrd_core::qnn::{param_count, ArchSpec, TrainConfig};
use qrd_core::{fidelity, Dataset, FidelityReport};

use super::train::{save_qnn, train_qnn};
use super::{check_seeds, create_dir, emit, load_dataset, DataInfo};
use crate::cli::SweepArgs;
use crate::error::{config_err, CliError, CliResult};
use crate::manifest::{manifest_in, Manifest};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    InputBits,
    WeightBits,
    ActBits,
    /// Weight and activation bits set together.
    WeightActBits,
    /// Hidden widths of a dense network, `64` or `128x32`.
    HiddenDims,
    /// Architecture presets; rows report their parameter counts.
    NParams,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "input_bits" => Self::InputBits,
            "weight_bits" => Self::WeightBits,
            "act_bits" => Self::ActBits,
            "weight_act_bits" => Self::WeightActBits,
            "hidden_dims" => Self::HiddenDims,
            "n_params" => Self::NParams,
            other => {
                return Err(format!(
                    "unknown sweep axis {other:?}; expected input_bits, weight_bits, act_bits, weight_act_bits, hidden_dims or n_params"
                ))
            }
        })
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::InputBits => "input_bits",
            Self::WeightBits => "weight_bits",
            Self::ActBits => "act_bits",
            Self::WeightActBits => "weight_act_bits",
            Self::HiddenDims => "hidden_dims",
            Self::NParams => "n_params",
        }
    }

    /// The architecture for one axis value, derived from `base`.
    pub fn apply(self, base: &ArchSpec, value: &str) -> Result<ArchSpec, String> {
        let bits = || value.parse::<u8>().map_err(|_| format!("{} value {value:?} is not a bit width", self.name()));
        let spec = match self {
            Self::InputBits => base.clone().with_bits(bits()?, base.weight_bits, base.act_bits),
            Self::WeightBits => base.clone().with_bits(base.input_bits, bits()?, base.act_bits),
            Self::ActBits => base.clone().with_bits(base.input_bits, base.weight_bits, bits()?),
            Self::WeightActBits => {
                let b = bits()?;
                base.clone().with_bits(base.input_bits, b, b)
            }
            Self::HiddenDims => {
                let mut dims = vec![base.n_inputs()];
                for w in value.split('x') {
                    dims.push(w.trim().parse().map_err(|_| format!("hidden_dims value {value:?}: expected widths like 64x32"))?);
                }
                dims.push(base.n_outputs());
                let mut a = ArchSpec::dense(dims, (base.input_bits, base.weight_bits, base.act_bits));
                a.dropout_p = base.dropout_p;
                a
            }
            Self::NParams => ArchSpec::preset(value, base.n_outputs()).map_err(|e| e.to_string())?,
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

struct Cell {
    value_index: usize,
    seed: u64,
    arch: Result<ArchSpec, String>,
}

struct CellResult {
    n_params: Option<usize>,
    outcome: Result<FidelityReport, String>,
}

/// Boxcar window that maps the traces onto the architecture's input width.
fn window_for(arch: &ArchSpec, n_samples: usize, default: usize) -> Result<usize, String> {
    if arch.n_inputs() == 2 * n_samples / default && n_samples.is_multiple_of(default) {
        return Ok(default);
    }
    let width = arch.n_inputs();
    if width.is_multiple_of(2) && width > 0 && (2 * n_samples).is_multiple_of(width) {
        return Ok(2 * n_samples / width);
    }
    Err(format!("{width} inputs cannot be formed from {n_samples} samples by a boxcar window"))
}

fn cell_dir(root: &Path, axis: SweepAxis, value: &str, seed: u64) -> PathBuf {
    let safe: String = value.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    root.join("cells").join(format!("{}-{safe}", axis.name())).join(format!("seed-{seed}"))
}

fn run_cell(
    cell: &Cell,
    train: &Dataset,
    test: &Dataset,
    tcfg: &TrainConfig,
    window: usize,
) -> (CellResult, Option<(qrd_core::qnn::QnnModel, qrd_core::qnn::TrainHistory)>) {
    let arch = match &cell.arch {
        Ok(a) => a,
        Err(e) => return (CellResult { n_params: None, outcome: Err(e.clone()) }, None),
    };
    let n_params = param_count(arch).ok();
    let run = || -> Result<_, String> {
        let w = window_for(arch, train.device.n_samples, window)?;
        let cfg = TrainConfig { seed: cell.seed, ..*tcfg };
        let (model, history) = train_qnn(arch, train, w, &cfg).map_err(|e| e.to_string())?;
        let preds = model.predict_dataset(test).map_err(|e| e.to_string())?;
        let report = fidelity(&test.labels(), &preds, test.n_qubits()).map_err(|e| e.to_string())?;
        Ok((report, model, history))
    };
    match run() {
        Ok((report, model, history)) => (CellResult { n_params, outcome: Ok(report) }, Some((model, history))),
        Err(e) => (CellResult { n_params, outcome: Err(e) }, None),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn run(args: &SweepArgs) -> CliResult<()> {
    let mut cfg = args.common.load()?;
    cfg.train.seed = args.common.seed.or(cfg.train.seed);
    args.arch.apply(&mut cfg);
    args.train_flags.apply(&mut cfg);
    let s = &mut cfg.sweep;
    s.axis = args.axis.clone().or(s.axis.take());
    s.values = args.values.clone().or(s.values.take());
    s.reps = args.reps.or(s.reps);
    let axis: SweepAxis = match &cfg.sweep.axis {
        Some(a) => a.parse().map_err(CliError::Config)?,
        None => return config_err("sweep needs an axis (--axis or [sweep].axis)"),
    };
    let values = cfg.sweep.values.clone().unwrap_or_default();
    if values.is_empty() {
        return config_err("sweep needs a nonempty value list");
    }
    let reps = cfg.sweep.reps.unwrap_or(1);
    if reps == 0 {
        return config_err("sweep.reps must be at least 1");
    }

    let train = load_dataset(&args.train)?;
    let test = load_dataset(&args.test)?;
    if train.n_qubits() != test.n_qubits() || train.device.n_samples != test.device.n_samples {
        return Err(CliError::Runtime("training and held-out datasets have different shapes".into()));
    }
    check_seeds(train.device.seed, test.device.seed, args.allow_same_seed)?;
    let n_qubits = train.n_qubits();
    let base = cfg.arch(n_qubits)?;
    let tcfg = cfg.train_config()?;
    let window = cfg.window()?;

    let cells: Vec<Cell> = values
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| {
            let arch = axis.apply(&base, v);
            (0..reps as u64).map(move |r| Cell { value_index: vi, seed: tcfg.seed + r, arch: arch.clone() })
        })
        .collect();
    log::info!("sweeping {} over {} values x {reps} seeds", axis.name(), values.len());

    create_dir(&args.out_dir)?;
    let results: Vec<(CellResult, Option<_>)> = cells.par_iter().map(|c| run_cell(c, &train, &test, &tcfg, window)).collect();

    let mut manifest = Manifest::new(
        "sweep",
        &serde_json::json!({
            "run": cfg,
            "axis": axis.name(),
            "base_arch": base,
            "train_data": DataInfo::of(&args.train, &train),
            "test_data": DataInfo::of(&args.test, &test),
        }),
    );
    manifest.input(&args.train)?;
    manifest.input(&args.test)?;

    let mut csv =
        format!("axis,value,seed,n_params,f_gm,{},error\n", (0..n_qubits).map(|q| format!("f_q{q}")).collect::<Vec<_>>().join(","));
    let mut per_value: Vec<Vec<f64>> = vec![Vec::new(); values.len()];
    for (cell, (res, trained)) in cells.iter().zip(&results) {
        let value = &values[cell.value_index];
        let params = res.n_params.map_or(String::new(), |n| n.to_string());
        match &res.outcome {
            Ok(r) => {
                let fs: Vec<String> = r.fidelity.iter().map(|f| f.to_string()).collect();
                let _ = writeln!(csv, "{},{},{},{params},{},{},", axis.name(), csv_field(value), cell.seed, r.f_gm, fs.join(","));
                per_value[cell.value_index].push(r.f_gm);
            }
            Err(e) => {
                let blanks = ",".repeat(n_qubits);
                let _ = writeln!(csv, "{},{},{},{params},{blanks},{}", axis.name(), csv_field(value), cell.seed, csv_field(e));
            }
        }
        if let Some((model, history)) = trained {
            let dir = cell_dir(&args.out_dir, axis, value, cell.seed);
            create_dir(&dir)?;
            save_qnn(&mut manifest, &dir, model, history)?;
        }
    }
    emit(&mut manifest, &args.out_dir.join(SWEEP_FILE), &csv)?;

    let mut summary = String::from("axis,value,n_ok,mean_f_gm,std_f_gm,min_f_gm,max_f_gm\n");
    for (v, fs) in values.iter().zip(&per_value) {
        if fs.is_empty() {
            let _ = writeln!(summary, "{},{},0,,,,", axis.name(), csv_field(v));
            continue;
        }
        let n = fs.len() as f64;
        let mean = fs.iter().sum::<f64>() / n;
        let std = if fs.len() > 1 { (fs.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        let lo = fs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = fs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(summary, "{},{},{},{mean},{std},{lo},{hi}", axis.name(), csv_field(v), fs.len());
        println!("{} = {v}: mean F_GM {mean:.4} over {} runs", axis.name(), fs.len());
    }
    emit(&mut manifest, &args.out_dir.join(SWEEP_SUMMARY_FILE), &summary)?;
    manifest.write(&manifest_in(&args.out_dir))?;

    let failed = results.iter().filter(|(r, _)| r.outcome.is_err()).count();
    if failed > 0 {
        println!("{failed} of {} cells failed; see the error column", results.len());
    }
    Ok(())
}
