use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{parse_pair, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "qrd",
    version,
    about = "Multiplexed qubit-readout discrimination: data synthesis, training, evaluation and hardware simulation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a labelled readout dataset (QRD1 plus JSON sidecar).
    Gen(GenArgs),
    /// Train a discriminator on a dataset.
    Train(TrainArgs),
    /// Evaluate a discriminator on a held-out dataset.
    Eval(EvalArgs),
    /// Train and evaluate a grid of QNN variants.
    Sweep(SweepArgs),
    /// Compile a QNN to a threshold network, check it and estimate latency.
    Hwsim(HwsimArgs),
    /// Collect eval, sweep and hwsim outputs into summary tables.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discriminator {
    /// Boxcar integration with a mean-midpoint threshold.
    Bf,
    /// Matched filter.
    Mf,
    /// Float linear SVM.
    Svm,
    /// 8-bit SVM with separate demodulation and weight multipliers.
    SvmQ2,
    /// 8-bit SVM with fused weight-times-demodulation coefficients.
    SvmQ1,
    /// Quantized neural network.
    Qnn,
}

impl Discriminator {
    pub fn name(self) -> &'static str {
        match self {
            Discriminator::Bf => "bf",
            Discriminator::Mf => "mf",
            Discriminator::Svm => "svm",
            Discriminator::SvmQ2 => "svm-q2",
            Discriminator::SvmQ1 => "svm-q1",
            Discriminator::Qnn => "qnn",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset seed for gen, training seed for train and sweep.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// paper5q or independent.
    #[arg(long)]
    pub preset: Option<String>,
    /// Keep the first N qubits of the preset.
    #[arg(long)]
    pub qubits: Option<usize>,
    #[arg(long)]
    pub shots_per_state: Option<usize>,
    /// Complex samples per shot.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Per-quadrature noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    /// DeviceConfig JSON replacing the preset.
    #[arg(long, value_name = "FILE")]
    pub device: Option<PathBuf>,
    /// Output dataset path; the sidecar and manifest are written next to it.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ArchFlags {
    /// Architecture preset, arch1..arch9.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub in_bits: Option<u8>,
    #[arg(long)]
    pub w_bits: Option<u8>,
    #[arg(long)]
    pub a_bits: Option<u8>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub val_split: Option<f64>,
    /// Boxcar window for the input reduction.
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SvmFlags {
    #[arg(long)]
    pub svm_lambda: Option<f64>,
    #[arg(long)]
    pub svm_epochs: Option<usize>,
    /// Percentile of |sample| used to calibrate the 8-bit SVM input.
    #[arg(long)]
    pub svm_percentile: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training dataset (QRD1).
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// qnn, mf or svm.
    #[arg(long, value_enum, default_value = "qnn")]
    pub discriminator: Discriminator,
    #[command(flatten)]
    pub arch: ArchFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub svm: SvmFlags,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Held-out dataset (QRD1).
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub discriminator: Discriminator,
    /// Trained model file (QNM1, QMF1 or QSV1).
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Training dataset for fitting a baseline on the fly.
    #[arg(long, value_name = "FILE")]
    pub train: Option<PathBuf>,
    /// Permit a held-out dataset generated with the training seed.
    #[arg(long)]
    pub allow_same_seed: bool,
    #[command(flatten)]
    pub svm: SvmFlags,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub test: PathBuf,
    /// input_bits, weight_bits, act_bits, weight_act_bits, hidden_dims or n_params.
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated axis values, e.g. 2,4,8 or 64x32 or arch4,arch5.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<String>>,
    /// Repetitions per value with seeds seed, seed+1, ...
    #[arg(long)]
    pub reps: Option<usize>,
    #[command(flatten)]
    pub arch: ArchFlags,
    #[command(flatten)]
    pub train_flags: TrainFlags,
    #[arg(long)]
    pub allow_same_seed: bool,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct HwsimArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trained QNN (QNM1).
    #[arg(long, value_name = "FILE", conflicts_with = "arch", required_unless_present = "arch")]
    pub model: Option<PathBuf>,
    /// Latency-only run for an architecture preset.
    #[arg(long)]
    pub arch: Option<String>,
    /// Output heads for --arch.
    #[arg(long, default_value_t = 5)]
    pub qubits: usize,
    /// Dataset for the integer/reference equivalence check.
    #[arg(long, value_name = "FILE", requires = "model")]
    pub data: Option<PathBuf>,
    /// Cap a layer's PE count, LAYER=CAP; repeatable.
    #[arg(long, value_parser = parse_pair)]
    pub pe_cap: Vec<(usize, usize)>,
    /// Cap a layer's SIMD width, LAYER=CAP; repeatable.
    #[arg(long, value_parser = parse_pair)]
    pub simd_cap: Vec<(usize, usize)>,
    /// Streaming overlap for piecewise networks.
    #[arg(long)]
    pub overlap: Option<bool>,
    #[arg(long)]
    pub clock_mhz: Option<f64>,
    /// Pipeline overhead cycles per layer.
    #[arg(long)]
    pub overhead: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Output directories of eval, sweep or hwsim runs.
    #[arg(long, required = true, num_args = 1.., value_name = "DIR")]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

impl ArchFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let a = &mut cfg.arch;
        if self.arch.is_some() {
            a.preset = self.arch.clone();
            a.layer_dims = None;
            a.kind = None;
            a.n_segments = None;
            a.piece_len = None;
        }
        a.input_bits = self.in_bits.or(a.input_bits);
        a.weight_bits = self.w_bits.or(a.weight_bits);
        a.act_bits = self.a_bits.or(a.act_bits);
        a.dropout = self.dropout.or(a.dropout);
    }
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        t.epochs = self.epochs.or(t.epochs);
        t.lr0 = self.lr.or(t.lr0);
        t.weight_decay = self.weight_decay.or(t.weight_decay);
        t.batch_size = self.batch_size.or(t.batch_size);
        t.val_split = self.val_split.or(t.val_split);
        t.window = self.window.or(t.window);
    }
}

impl SvmFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.svm;
        s.lambda = self.svm_lambda.or(s.lambda);
        s.epochs = self.svm_epochs.or(s.epochs);
        s.input_percentile = self.svm_percentile.or(s.input_percentile);
    }
}

impl CommonArgs {
    /// Loads the config file. Each command routes `--seed` to the seed it
    /// controls.
    pub fn load(&self) -> crate::error::CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref())
    }
}
