use std::path::Path;

use serde::Serialize;

use qrd_core::classical::{calibrate_svm_input, write_qmf, write_qsv, MatchedFilterBank, SvmBank};
use qrd_core::qnn::{build_model, param_count, train, write_model, ArchSpec, QnnModel, TrainConfig, TrainHistory};
use qrd_core::Dataset;

use super::{create_dir, emit, load_dataset, write_with, DataInfo};
use crate::cli::{Discriminator, TrainArgs};
use crate::config::RunConfig;
use crate::error::{config_err, CliResult};
use crate::manifest::{manifest_in, Manifest};

pub const QNN_FILE: &str = "model.qnm";
pub const MF_FILE: &str = "model.qmf";
pub const SVM_FILE: &str = "model.qsv";
pub const HISTORY_FILE: &str = "history.csv";

/// What a training run recorded about its inputs.
#[derive(Serialize)]
struct TrainRecord<'a> {
    run: &'a RunConfig,
    discriminator: &'static str,
    data: DataInfo,
    #[serde(skip_serializing_if = "Option::is_none")]
    arch: Option<&'a ArchSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_params: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
}

/// Fails before training when the features cannot feed `arch`.
pub(crate) fn check_arch_fits(arch: &ArchSpec, ds: &Dataset, window: usize) -> CliResult<()> {
    let n = ds.device.n_samples;
    if window == 0 || !n.is_multiple_of(window) {
        return config_err(format!("boxcar window {window} does not divide {n} samples"));
    }
    let width = 2 * n / window;
    if arch.n_inputs() != width {
        return config_err(format!("architecture consumes {} features but {n} samples with window {window} give {width}", arch.n_inputs()));
    }
    if arch.n_outputs() != ds.n_qubits() {
        return config_err(format!("architecture has {} outputs for {} qubits", arch.n_outputs(), ds.n_qubits()));
    }
    Ok(())
}

pub(crate) fn train_qnn(arch: &ArchSpec, ds: &Dataset, window: usize, cfg: &TrainConfig) -> CliResult<(QnnModel, TrainHistory)> {
    check_arch_fits(arch, ds, window)?;
    let model = build_model(arch, cfg.seed)?;
    let out = train(model, ds, window, cfg)?;
    Ok((out.model, out.history))
}

pub(crate) fn save_qnn(manifest: &mut Manifest, dir: &Path, model: &QnnModel, history: &TrainHistory) -> CliResult<()> {
    write_with(manifest, &dir.join(QNN_FILE), |b| write_model(b, model))?;
    emit(manifest, &dir.join(HISTORY_FILE), history.to_csv())
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = args.common.load()?;
    cfg.train.seed = args.common.seed.or(cfg.train.seed);
    cfg.svm.seed = args.common.seed.or(cfg.svm.seed);
    args.arch.apply(&mut cfg);
    args.train.apply(&mut cfg);
    args.svm.apply(&mut cfg);

    let ds = load_dataset(&args.data)?;
    let data = DataInfo::of(&args.data, &ds);
    let n_qubits = ds.n_qubits();
    let disc = args.discriminator;
    let mut record = TrainRecord { run: &cfg, discriminator: disc.name(), data, arch: None, n_params: None, train: None, window: None };

    // All configuration is resolved before any output is written.
    let (arch, tcfg, window) = match disc {
        Discriminator::Qnn => (Some(cfg.arch(n_qubits)?), Some(cfg.train_config()?), Some(cfg.window()?)),
        Discriminator::Mf | Discriminator::Svm => (None, None, None),
        other => return config_err(format!("train supports qnn, mf and svm; {} is fitted by `eval --train`", other.name())),
    };
    if let (Some(a), Some(w)) = (&arch, window) {
        check_arch_fits(a, &ds, w)?;
    }
    let svm_cfg = cfg.svm_config()?;
    let percentile = cfg.svm_percentile()?;

    create_dir(&args.out_dir)?;
    let mut outputs = Manifest::new("train", &());
    match disc {
        Discriminator::Qnn => {
            let (arch, tcfg, window) = (arch.as_ref().unwrap(), tcfg.as_ref().unwrap(), window.unwrap());
            log::info!("training {:?} {:?} for {} epochs on {} shots", arch.kind, arch.layer_dims, tcfg.epochs, ds.shots.len());
            let (model, history) = train_qnn(arch, &ds, window, tcfg)?;
            save_qnn(&mut outputs, &args.out_dir, &model, &history)?;
            record.n_params = Some(param_count(arch)?);
            record.arch = Some(arch);
            record.train = Some(tcfg);
            record.window = Some(window);
            if let Some(last) = history.epochs.last() {
                let val = last.val_fgm.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                println!("trained {} parameters; final loss {:.5}, validation F_GM {val}", record.n_params.unwrap(), last.loss);
            }
        }
        Discriminator::Mf => {
            let bank = MatchedFilterBank::train(&ds.shots, n_qubits)?;
            write_with(&mut outputs, &args.out_dir.join(MF_FILE), |b| write_qmf(b, &bank))?;
            println!("trained {n_qubits} matched filters");
        }
        Discriminator::Svm => {
            let bank = SvmBank::train(&ds.shots, n_qubits, &svm_cfg)?;
            let spec = calibrate_svm_input(&ds.shots, percentile)?;
            write_with(&mut outputs, &args.out_dir.join(SVM_FILE), |b| write_qsv(b, &bank, &spec))?;
            println!("trained {n_qubits} linear SVMs");
        }
        _ => unreachable!("rejected above"),
    }

    let mut manifest = Manifest::new("train", &record);
    manifest.input(&args.data)?;
    manifest.outputs = outputs.outputs;
    manifest.write(&manifest_in(&args.out_dir))?;
    println!("wrote {}", args.out_dir.display());
    Ok(())
}
