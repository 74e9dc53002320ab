use std::path::Path;

use serde::{Deserialize, Serialize};

use qrd_core::classical::{
    calibrate_svm_input, read_qmf, read_qsv, BoxcarDiscriminator, MatchedFilterBank, QuantizedSvmBank, SvmBank, SvmVariant,
};
use qrd_core::metrics::{cross_fidelity_json, summarize_csv};
use qrd_core::qnn::read_model;
use qrd_core::quant::QuantSpec;
use qrd_core::{fidelity, Dataset, FidelityReport};

use super::{check_seeds, create_dir, emit, format_fidelities, load_dataset, predict_all, DataInfo};
use crate::cli::{Discriminator, EvalArgs};
use crate::config::RunConfig;
use crate::error::{config_err, io_at, CliError, CliResult};
use crate::manifest::{manifest_in, Manifest};

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const CF_JSON: &str = "cross_fidelity.json";

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub discriminator: String,
    pub n_shots: usize,
    pub mean_abs_off_diagonal: f64,
    pub report: FidelityReport,
}

fn open(path: &Path) -> CliResult<std::io::BufReader<std::fs::File>> {
    Ok(std::io::BufReader::new(std::fs::File::open(path).map_err(io_at(path))?))
}

fn file_err(path: &Path) -> impl FnOnce(qrd_core::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Seed of the dataset a model was trained on, from the model's manifest.
fn model_data_seed(model: &Path) -> Option<u64> {
    let dir = model.parent()?;
    let m = Manifest::read(&manifest_in(dir)).ok()?;
    m.config.get("data")?.get("seed")?.as_u64()
}

fn check_qubits(what: &str, n: usize, test: &Dataset) -> CliResult<()> {
    if n != test.n_qubits() {
        return Err(CliError::Runtime(format!("{what} covers {n} qubits, dataset has {}", test.n_qubits())));
    }
    Ok(())
}

fn svm_bank(args: &EvalArgs, cfg: &RunConfig, train: Option<&Dataset>, test: &Dataset) -> CliResult<(SvmBank, QuantSpec)> {
    if let Some(path) = &args.model {
        let (bank, spec) = read_qsv(&mut open(path)?).map_err(file_err(path))?;
        check_qubits("SVM bank", bank.svms.len(), test)?;
        return Ok((bank, spec));
    }
    let train = train.expect("checked by caller");
    let bank = SvmBank::train(&train.shots, train.n_qubits(), &cfg.svm_config()?)?;
    let spec = calibrate_svm_input(&train.shots, cfg.svm_percentile()?)?;
    Ok((bank, spec))
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let mut cfg = args.common.load()?;
    cfg.svm.seed = args.common.seed.or(cfg.svm.seed);
    args.svm.apply(&mut cfg);
    let disc = args.discriminator;
    match (disc, &args.model, &args.train) {
        (_, Some(_), Some(_)) => return config_err("give either --model or --train, not both"),
        (Discriminator::Qnn, None, _) => return config_err("qnn evaluation needs --model"),
        (Discriminator::Bf, Some(_), _) => return config_err("bf has no model file; pass --train"),
        (_, None, None) => return config_err(format!("{} needs --model or --train", disc.name())),
        _ => {}
    }
    cfg.svm_config()?;
    cfg.svm_percentile()?;

    let test = load_dataset(&args.data)?;
    let train = args.train.as_deref().map(load_dataset).transpose()?;
    let train_seed = match (&train, &args.model) {
        (Some(t), _) => {
            check_qubits("training dataset", t.n_qubits(), &test)?;
            Some(t.device.seed)
        }
        (None, Some(m)) => {
            let s = model_data_seed(m);
            if s.is_none() {
                log::warn!("no training manifest next to {}; cannot check dataset seeds", m.display());
            }
            s
        }
        _ => None,
    };
    if let Some(s) = train_seed {
        check_seeds(s, test.device.seed, args.allow_same_seed)?;
    }

    let shots = &test.shots;
    let preds = match disc {
        Discriminator::Bf => {
            let bf = BoxcarDiscriminator::train(&train.as_ref().unwrap().shots, &test.device)?;
            predict_all(shots, |s| bf.discriminate(s))?
        }
        Discriminator::Mf => {
            let bank = match &args.model {
                Some(p) => read_qmf(&mut open(p)?).map_err(file_err(p))?,
                None => MatchedFilterBank::train(&train.as_ref().unwrap().shots, test.n_qubits())?,
            };
            check_qubits("matched-filter bank", bank.filters.len(), &test)?;
            predict_all(shots, |s| Ok(bank.discriminate(s)))?
        }
        Discriminator::Svm => {
            let (bank, _) = svm_bank(args, &cfg, train.as_ref(), &test)?;
            predict_all(shots, |s| Ok(bank.discriminate(s)))?
        }
        Discriminator::SvmQ2 | Discriminator::SvmQ1 => {
            let (bank, spec) = svm_bank(args, &cfg, train.as_ref(), &test)?;
            let variant = if disc == Discriminator::SvmQ1 { SvmVariant::Fused } else { SvmVariant::TwoMultiplier };
            let q = QuantizedSvmBank::new(&bank, &test.device, variant, spec, false)?;
            predict_all(shots, |s| Ok(q.discriminate(s)))?
        }
        Discriminator::Qnn => {
            let path = args.model.as_ref().unwrap();
            let model = read_model(&mut open(path)?).map_err(file_err(path))?;
            check_qubits("model", model.arch.n_outputs(), &test)?;
            model.predict_dataset(&test)?
        }
    };

    let report = fidelity(&test.labels(), &preds, test.n_qubits())?;
    let summary = EvalSummary {
        discriminator: disc.name().into(),
        n_shots: shots.len(),
        mean_abs_off_diagonal: report.mean_abs_off_diagonal(),
        report,
    };

    create_dir(&args.out_dir)?;
    let record = serde_json::json!({
        "run": cfg,
        "discriminator": disc.name(),
        "data": DataInfo::of(&args.data, &test),
        "train_data": train.as_ref().zip(args.train.as_deref()).map(|(t, p)| DataInfo::of(p, t)),
        "allow_same_seed": args.allow_same_seed,
    });
    let mut manifest = Manifest::new("eval", &record);
    manifest.input(&args.data)?;
    for p in args.model.iter().chain(args.train.iter()) {
        manifest.input(p)?;
    }
    let dir = &args.out_dir;
    emit(&mut manifest, &dir.join(METRICS_CSV), summarize_csv(&summary.report))?;
    emit(&mut manifest, &dir.join(METRICS_JSON), serde_json::to_string_pretty(&summary).expect("plain data") + "\n")?;
    emit(&mut manifest, &dir.join(CF_JSON), cross_fidelity_json(&summary.report) + "\n")?;
    manifest.write(&manifest_in(dir))?;

    let r = &summary.report;
    println!("{} on {} shots: F_GM {:.4}; per-qubit F {}", disc.name(), summary.n_shots, r.f_gm, format_fidelities(r));
    println!("mean |CF| off-diagonal {:.4}", summary.mean_abs_off_diagonal);
    if r.is_degenerate() {
        println!("warning: a qubit has zero fidelity; F_GM is 0");
    }
    Ok(())
}
