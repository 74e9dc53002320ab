//! Quantized MLP discriminators with dense, segmented-parallel and
//! piecewise-streaming topologies, trained with fake quantization and
//! straight-through gradients. One sigmoid output per qubit.
//!
//! The forward pass multiplies integer-valued level matrices and applies
//! the combined scale afterwards, so the integer threshold network in
//! `hwsim` reproduces it exactly.

use std::io::{Read, Write};
use std::ops::Range;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::classical::{read_quant_spec, write_quant_spec};
use crate::error::{domain, Error, Result};
use crate::metrics::fidelity;
use crate::quant::{calibrate_scale, QuantSpec, Signedness};
use crate::synth::{boxcar_features, Dataset};

/// Clip ceiling of the hidden activation quantizer (dense and segmented).
pub const ACT_MAX: f64 = 2.0;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const INPUT_PERCENTILE: f64 = 99.9;
/// Two-bit weight scale over mean |w|; rounding zeroes weights below
/// `0.7 mean|w|`.
pub const TERNARY_SCALE: f64 = 1.4;

pub const PRESET_NAMES: [&str; 9] = ["arch1", "arch2", "arch3", "arch4", "arch5", "arch6", "arch7", "arch8", "arch9"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Dense,
    Segmented,
    Piecewise,
}

impl ArchKind {
    fn code(self) -> u8 {
        match self {
            Self::Dense => 0,
            Self::Segmented => 1,
            Self::Piecewise => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Self::Dense),
            1 => Ok(Self::Segmented),
            2 => Ok(Self::Piecewise),
            _ => Err(Error::Format(format!("unknown architecture kind {c}"))),
        }
    }
}

/// Network topology and precision.
///
/// `layer_dims` lists each layer's input width followed by the output
/// width. For piecewise networks, layers after the first take the previous
/// layer's output plus `piece_len` fresh features, so hidden layer `k`
/// emits `layer_dims[k + 1] - piece_len` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub n_segments: usize,
    #[serde(default)]
    pub piece_len: usize,
    pub input_bits: u8,
    pub weight_bits: u8,
    pub act_bits: u8,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default = "default_input_signedness")]
    pub input_signedness: Signedness,
}

fn default_dropout() -> f64 {
    0.1
}

fn default_input_signedness() -> Signedness {
    Signedness::SignedSymmetric
}

/// One layer of the execution plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Parallel blocks sharing the input, outputs concatenated.
    pub n_blocks: usize,
    /// Leading `prev_dim` inputs come from the previous layer.
    pub prev_dim: usize,
    /// Trailing inputs taken from the feature vector.
    pub fresh: Option<Range<usize>>,
    pub hidden: bool,
}

impl LayerPlan {
    pub fn block_out(&self) -> usize {
        self.out_dim / self.n_blocks
    }
}

impl ArchSpec {
    fn with_kind(kind: ArchKind, layer_dims: Vec<usize>, bits: (u8, u8, u8)) -> Self {
        Self {
            kind,
            layer_dims,
            n_segments: 0,
            piece_len: 0,
            input_bits: bits.0,
            weight_bits: bits.1,
            act_bits: bits.2,
            dropout_p: default_dropout(),
            input_signedness: default_input_signedness(),
        }
    }

    pub fn dense(layer_dims: Vec<usize>, bits: (u8, u8, u8)) -> Self {
        Self::with_kind(ArchKind::Dense, layer_dims, bits)
    }

    pub fn segmented(layer_dims: Vec<usize>, n_segments: usize, bits: (u8, u8, u8)) -> Self {
        Self { n_segments, ..Self::with_kind(ArchKind::Segmented, layer_dims, bits) }
    }

    pub fn piecewise(layer_dims: Vec<usize>, piece_len: usize, bits: (u8, u8, u8)) -> Self {
        Self { piece_len, ..Self::with_kind(ArchKind::Piecewise, layer_dims, bits) }
    }

    /// Named topologies with `n_outputs` heads.
    pub fn preset(name: &str, n_outputs: usize) -> Result<Self> {
        let n = n_outputs;
        let spec = match name {
            "arch1" => Self::dense(vec![1000, 1000, 500, 250, n], (4, 2, 2)),
            "arch2" => Self::dense(vec![1024, 512, 256, n], (4, 2, 2)),
            "arch3" => Self::dense(vec![512, 128, 32, n], (4, 2, 2)),
            "arch4" => Self::dense(vec![512, 64, 32, n], (4, 2, 2)),
            "arch5" => Self::dense(vec![512, 64, n], (4, 2, 2)),
            "arch6" => Self::dense(vec![512, 64, n], (4, 1, 1)),
            "arch7" => Self::segmented(vec![512, 64, n], 8, (4, 2, 2)),
            "arch8" => Self::piecewise(vec![256, 128, 128, 128, 128, n], 64, (4, 2, 4)),
            "arch9" => Self::piecewise(vec![256, 128, 128, 128, 128, n], 64, (4, 1, 4)),
            other => return domain(format!("unknown architecture preset {other:?}; expected arch1..arch9")),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_bits(mut self, input_bits: u8, weight_bits: u8, act_bits: u8) -> Self {
        self.input_bits = input_bits;
        self.weight_bits = weight_bits;
        self.act_bits = act_bits;
        self
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_dims.last().unwrap_or(&0)
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    /// Length of the feature vector consumed by the whole network.
    pub fn n_inputs(&self) -> usize {
        match self.kind {
            ArchKind::Piecewise => self.layer_dims[0] + (self.n_layers() - 1) * self.piece_len,
            _ => self.layer_dims[0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.layer_dims;
        if d.len() < 2 {
            return domain("layer_dims needs at least an input and an output width");
        }
        if let Some(i) = d.iter().position(|&x| x == 0) {
            return domain(format!("layer_dims[{i}] is zero"));
        }
        for (name, b) in [("input", self.input_bits), ("weight", self.weight_bits), ("activation", self.act_bits)] {
            if !(1..=8).contains(&b) {
                return domain(format!("{name} bits {b} outside 1..=8"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return domain(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        match self.kind {
            ArchKind::Dense => {}
            ArchKind::Segmented => {
                if d.len() < 3 {
                    return domain("segmented networks need a hidden layer");
                }
                if self.n_segments == 0 || !d[1].is_multiple_of(self.n_segments) {
                    return domain(format!("{} segments do not divide hidden width {}", self.n_segments, d[1]));
                }
            }
            ArchKind::Piecewise => {
                if d.len() < 3 {
                    return domain("piecewise networks need a hidden layer");
                }
                if self.piece_len == 0 {
                    return domain("piece_len must be positive");
                }
                if let Some(k) = (1..d.len() - 1).find(|&k| d[k] <= self.piece_len) {
                    return domain(format!(
                        "layer {k} input width {} leaves no room for the previous output beside {} fresh features",
                        d[k], self.piece_len
                    ));
                }
            }
        }
        Ok(())
    }

    /// Per-layer execution plan.
    pub fn plan(&self) -> Result<Vec<LayerPlan>> {
        self.validate()?;
        let d = &self.layer_dims;
        let l = self.n_layers();
        let mut out = Vec::with_capacity(l);
        for k in 0..l {
            let hidden = k + 1 < l;
            let layer = match self.kind {
                ArchKind::Dense | ArchKind::Segmented => LayerPlan {
                    in_dim: d[k],
                    out_dim: d[k + 1],
                    n_blocks: if self.kind == ArchKind::Segmented && k == 0 { self.n_segments } else { 1 },
                    prev_dim: if k == 0 { 0 } else { d[k] },
                    fresh: (k == 0).then(|| 0..d[0]),
                    hidden,
                },
                ArchKind::Piecewise => {
                    let p = self.piece_len;
                    let out_dim = if hidden { d[k + 1] - p } else { d[k + 1] };
                    if k == 0 {
                        LayerPlan { in_dim: d[0], out_dim, n_blocks: 1, prev_dim: 0, fresh: Some(0..d[0]), hidden }
                    } else {
                        let start = d[0] + (k - 1) * p;
                        LayerPlan { in_dim: d[k], out_dim, n_blocks: 1, prev_dim: d[k] - p, fresh: Some(start..start + p), hidden }
                    }
                }
            };
            out.push(layer);
        }
        Ok(out)
    }
}

/// Weights plus biases. Batch-norm parameters are folded into thresholds
/// at deployment and are not counted.
pub fn param_count(arch: &ArchSpec) -> Result<usize> {
    Ok(arch.plan()?.iter().map(|l| l.in_dim * l.out_dim + l.out_dim).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(n: usize) -> Self {
        Self {
            gamma: Array1::ones(n),
            beta: Array1::zeros(n),
            running_mean: Array1::zeros(n),
            running_var: Array1::ones(n),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

/// Eval-mode batch norm of one pre-activation.
#[inline]
pub fn bn_eval(z: f64, gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> f64 {
    gamma * ((z - mean) / (var + eps).sqrt()) + beta
}

/// Pre-activation from an integer accumulator: `acc * scale + bias`.
#[inline]
pub fn affine(acc: f64, scale: f64, bias: f64) -> f64 {
    acc * scale + bias
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// `out x in`, master (unquantized) copy.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub bn: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub plan: LayerPlan,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QnnModel {
    pub arch: ArchSpec,
    pub layers: Vec<Layer>,
    pub input_spec: QuantSpec,
    pub boxcar_window: usize,
    /// Debug switch: every quantizer becomes the identity.
    pub quant_bypass: bool,
}

/// He-uniform weights, zero biases, identity batch norm.
pub fn build_model(arch: &ArchSpec, init_seed: u64) -> Result<QnnModel> {
    let plan = arch.plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let layers = plan
        .into_iter()
        .map(|p| {
            let limit = (6.0 / p.in_dim as f64).sqrt();
            let blocks = (0..p.n_blocks)
                .map(|_| {
                    let bo = p.block_out();
                    let weight = Array2::from_shape_simple_fn((bo, p.in_dim), || rng.random_range(-limit..=limit));
                    Block { weight, bias: Array1::zeros(bo), bn: p.hidden.then(|| BatchNorm::identity(bo)) }
                })
                .collect();
            Layer { plan: p, blocks }
        })
        .collect();
    let probe = QuantSpec::new(arch.input_bits, arch.input_signedness, 1.0)?;
    let input_spec = QuantSpec::new(arch.input_bits, arch.input_signedness, 1.0 / probe.max_level() as f64)?;
    Ok(QnnModel { arch: arch.clone(), layers, input_spec, boxcar_window: 2, quant_bypass: false })
}

pub fn predict_states(logits: &[f64]) -> u32 {
    logits.iter().enumerate().fold(0, |acc, (q, &z)| acc | (((z > 0.0) as u32) << q))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean over qubits of `BCEWithLogits(logit_q, bit q of label)`.
pub fn loss(logits: &[f64], label: u32) -> f64 {
    let sum: f64 = logits
        .iter()
        .enumerate()
        .map(|(q, &z)| {
            let y = ((label >> q) & 1) as f64;
            // max(z,0) - z y + ln(1 + e^-|z|)
            softplus(z) - z * y
        })
        .sum();
    sum / logits.len() as f64
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct BlockCache {
    w_lvl: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
    drop_mask: Option<Array2<f64>>,
    /// Post-dropout BN output.
    yd: Array2<f64>,
}

struct LayerCache {
    u_lvl: Array2<f64>,
    s_u: f64,
    s_w: f64,
    blocks: Vec<BlockCache>,
}

/// Gradients in `QnnModel::param_tensors` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl QnnModel {
    pub fn n_inputs(&self) -> usize {
        self.arch.n_inputs()
    }

    pub fn n_outputs(&self) -> usize {
        self.arch.n_outputs()
    }

    /// Per-tensor weight quantizer of layer `k`: mean-abs for binary
    /// weights, `TERNARY_SCALE * mean|w|` for two bits and max-abs above.
    pub fn weight_spec(&self, k: usize) -> QuantSpec {
        let bits = self.arch.weight_bits;
        let ws = self.layers[k].blocks.iter().flat_map(|b| b.weight.iter());
        let scale = if bits <= 2 {
            let (sum, n) = ws.fold((0.0, 0usize), |(s, n), w| (s + w.abs(), n + 1));
            let mean = sum / n.max(1) as f64;
            if bits == 1 {
                mean
            } else {
                TERNARY_SCALE * mean
            }
        } else {
            let probe = (1u32 << (bits - 1)) - 1;
            ws.fold(0.0f64, |m, w| m.max(w.abs())) / probe as f64
        };
        let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
        QuantSpec { bits, signedness: Signedness::SignedSymmetric, scale }
    }

    /// Unsigned activation quantizer of hidden layer `k`. Piecewise
    /// networks tie it to the input scale so that previous outputs and
    /// fresh features share one integer accumulator.
    pub fn act_spec(&self, k: usize) -> Option<QuantSpec> {
        if !self.layers[k].plan.hidden {
            return None;
        }
        let bits = self.arch.act_bits;
        let scale = match self.arch.kind {
            ArchKind::Piecewise => self.input_spec.scale,
            _ => ACT_MAX / ((1u32 << bits) - 1) as f64,
        };
        Some(QuantSpec { bits, signedness: Signedness::Unsigned, scale })
    }

    /// Scale of layer `k`'s input levels.
    pub fn input_scale(&self, k: usize) -> f64 {
        if k == 0 || self.arch.kind == ArchKind::Piecewise {
            self.input_spec.scale
        } else {
            self.act_spec(k - 1).expect("hidden layer").scale
        }
    }

    pub fn weight_levels(&self, k: usize) -> Vec<Array2<i32>> {
        let spec = self.weight_spec(k);
        self.layers[k].blocks.iter().map(|b| b.weight.mapv(|w| spec.level(w))).collect()
    }

    /// Input integer levels (as f64), or raw values under bypass.
    pub fn quantize_input(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.n_inputs() {
            return Err(Error::Shape { expected: self.n_inputs(), got: x.ncols() });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        if self.quant_bypass {
            return Ok(x.to_owned());
        }
        let spec = self.input_spec;
        Ok(x.mapv(|v| spec.level(v) as f64))
    }

    fn input_level_scale(&self) -> f64 {
        if self.quant_bypass {
            1.0
        } else {
            self.input_spec.scale
        }
    }

    /// Calibrates the input quantizer on `features` (training rows only).
    pub fn calibrate_input(&mut self, features: ArrayView2<f64>) -> Result<()> {
        let samples: Vec<f64> = features.iter().copied().collect();
        self.input_spec = calibrate_scale(&samples, self.arch.input_bits, self.arch.input_signedness, INPUT_PERCENTILE)?.spec;
        Ok(())
    }

    /// Core forward pass over input levels. Returns logits and, in train
    /// mode, the cache for the backward pass.
    fn forward_levels(&self, x_lvl: &Array2<f64>, mode: Mode, rng: &mut ChaCha8Rng, keep: bool) -> Result<(Array2<f64>, Vec<LayerCache>)> {
        let b = x_lvl.nrows();
        if mode == Mode::Train && b < 2 {
            return domain("train-mode batch norm needs at least 2 rows");
        }
        let mut prev = Array2::<f64>::zeros((b, 0));
        let mut prev_scale = self.input_level_scale();
        let mut caches = Vec::new();
        let p = if mode == Mode::Train { self.arch.dropout_p } else { 0.0 };
        for (k, layer) in self.layers.iter().enumerate() {
            let plan = &layer.plan;
            let u_lvl = match &plan.fresh {
                Some(r) if plan.prev_dim > 0 => concatenate![Axis(1), prev.view(), x_lvl.slice(s![.., r.clone()])],
                Some(r) => x_lvl.slice(s![.., r.clone()]).to_owned(),
                None => std::mem::replace(&mut prev, Array2::zeros((0, 0))),
            };
            let s_u = if self.quant_bypass { 1.0 } else { self.input_scale(k) };
            debug_assert!(k == 0 || self.quant_bypass || s_u == prev_scale);
            let wspec = self.weight_spec(k);
            let s_w = if self.quant_bypass { 1.0 } else { wspec.scale };
            let c = s_u * s_w;
            let act = if self.quant_bypass { None } else { self.act_spec(k) };
            let mut outs = Vec::with_capacity(layer.blocks.len());
            let mut bcaches = Vec::new();
            for blk in &layer.blocks {
                let w_lvl = if self.quant_bypass { blk.weight.clone() } else { blk.weight.mapv(|w| wspec.level(w) as f64) };
                let acc = u_lvl.dot(&w_lvl.t());
                let mut z = acc;
                for mut row in z.rows_mut() {
                    for (v, &bias) in row.iter_mut().zip(&blk.bias) {
                        *v = affine(*v, c, bias);
                    }
                }
                let Some(bn) = &blk.bn else {
                    outs.push(z);
                    continue;
                };
                let n_out = z.ncols();
                let mut y = Array2::zeros(z.raw_dim());
                let (mut xhat, mut inv_std) = (Array2::zeros((0, 0)), Array1::zeros(0));
                let (mut bmean, mut bvar) = (Array1::zeros(0), Array1::zeros(0));
                match mode {
                    Mode::Eval => {
                        for (mut yr, zr) in y.rows_mut().into_iter().zip(z.rows()) {
                            for j in 0..n_out {
                                yr[j] = bn_eval(zr[j], bn.gamma[j], bn.beta[j], bn.running_mean[j], bn.running_var[j], bn.eps);
                            }
                        }
                    }
                    Mode::Train => {
                        bmean = z.mean_axis(Axis(0)).expect("nonempty batch");
                        let centered = &z - &bmean;
                        bvar = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty batch");
                        inv_std = bvar.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                        xhat = &centered * &inv_std;
                        y = &xhat * &bn.gamma + &bn.beta;
                    }
                }
                let drop_mask = (p > 0.0).then(|| {
                    let keep_scale = 1.0 / (1.0 - p);
                    Array2::from_shape_simple_fn(y.raw_dim(), || if rng.random::<f64>() < p { 0.0 } else { keep_scale })
                });
                let yd = match &drop_mask {
                    Some(m) => &y * m,
                    None => y,
                };
                let a = match &act {
                    Some(spec) => yd.mapv(|v| spec.level(v.max(0.0)) as f64),
                    None => yd.mapv(|v| v.max(0.0)),
                };
                outs.push(a);
                if keep {
                    bcaches.push(BlockCache { w_lvl, xhat, inv_std, batch_mean: bmean, batch_var: bvar, drop_mask, yd });
                }
            }
            if keep && !plan.hidden {
                // The output layer only needs its weight levels.
                let w_lvl =
                    if self.quant_bypass { layer.blocks[0].weight.clone() } else { layer.blocks[0].weight.mapv(|w| wspec.level(w) as f64) };
                bcaches.push(BlockCache {
                    w_lvl,
                    xhat: Array2::zeros((0, 0)),
                    inv_std: Array1::zeros(0),
                    batch_mean: Array1::zeros(0),
                    batch_var: Array1::zeros(0),
                    drop_mask: None,
                    yd: Array2::zeros((0, 0)),
                });
            }
            let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
            let out = if views.len() == 1 {
                outs.pop().expect("one block")
            } else {
                concatenate(Axis(1), &views).map_err(|e| Error::Degenerate(e.to_string()))?
            };
            if keep {
                caches.push(LayerCache { u_lvl, s_u, s_w, blocks: bcaches });
            }
            prev_scale = act.map_or(1.0, |a| a.scale);
            prev = out;
        }
        Ok((prev, caches))
    }

    /// Batched logits. Train mode uses batch statistics and dropout drawn
    /// from `seed`; it never updates running statistics.
    pub fn forward_batch(&self, x: ArrayView2<f64>, mode: Mode, seed: u64) -> Result<Array2<f64>> {
        let x_lvl = self.quantize_input(x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.forward_levels(&x_lvl, mode, &mut rng, false)?.0)
    }

    /// Eval-mode logits for one feature vector.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, features.len()), features)
            .map_err(|_| Error::Shape { expected: self.n_inputs(), got: features.len() })?;
        Ok(self.forward_batch(x, Mode::Eval, 0)?.row(0).to_vec())
    }

    /// Eval-mode logits over many rows, processed in fixed chunks.
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        const CHUNK: usize = 4096;
        let mut out = Array2::zeros((x.nrows(), self.n_outputs()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for start in (0..x.nrows()).step_by(CHUNK) {
            let end = (start + CHUNK).min(x.nrows());
            let x_lvl = self.quantize_input(x.slice(s![start..end, ..]))?;
            let (z, _) = self.forward_levels(&x_lvl, Mode::Eval, &mut rng, false)?;
            out.slice_mut(s![start..end, ..]).assign(&z);
        }
        Ok(out)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<u32>> {
        Ok(self.logits(x)?.rows().into_iter().map(|r| predict_states(r.as_slice().expect("row-major"))).collect())
    }

    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<u32>> {
        let x = boxcar_features(&ds.shots, self.boxcar_window)?;
        self.predict(x.view())
    }

    /// Parameter tensors in a fixed order: per layer, per block, weight,
    /// bias, then batch-norm gamma and beta when present.
    pub fn param_tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            for b in &l.blocks {
                out.push(b.weight.as_slice().expect("standard layout"));
                out.push(b.bias.as_slice().expect("standard layout"));
                if let Some(bn) = &b.bn {
                    out.push(bn.gamma.as_slice().expect("standard layout"));
                    out.push(bn.beta.as_slice().expect("standard layout"));
                }
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            for b in &mut l.blocks {
                out.push(b.weight.as_slice_mut().expect("standard layout"));
                out.push(b.bias.as_slice_mut().expect("standard layout"));
                if let Some(bn) = &mut b.bn {
                    out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                    out.push(bn.beta.as_slice_mut().expect("standard layout"));
                }
            }
        }
        out
    }

    /// Which entries of `param_tensors` are weight matrices.
    pub fn weight_tensor_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for l in &self.layers {
            for b in &l.blocks {
                out.extend([true, false]);
                if b.bn.is_some() {
                    out.extend([false, false]);
                }
            }
        }
        out
    }

    /// Mean batch loss in train mode (dropout from `seed`).
    pub fn batch_loss(&self, x: ArrayView2<f64>, labels: &[u32], seed: u64) -> Result<f64> {
        let z = self.forward_batch(x, Mode::Train, seed)?;
        Ok(mean_loss(&z, labels))
    }

    /// Train-mode loss and gradients w.r.t. every parameter tensor.
    pub fn loss_and_grads(&self, x: ArrayView2<f64>, labels: &[u32], seed: u64) -> Result<(f64, Gradients)> {
        let x_lvl = self.quantize_input(x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, g, _) = self.step_grads(&x_lvl, labels, &mut rng)?;
        Ok((l, g))
    }

    fn step_grads(&self, x_lvl: &Array2<f64>, labels: &[u32], rng: &mut ChaCha8Rng) -> Result<(f64, Gradients, Vec<LayerCache>)> {
        if labels.len() != x_lvl.nrows() {
            return Err(Error::Shape { expected: x_lvl.nrows(), got: labels.len() });
        }
        let (z, caches) = self.forward_levels(x_lvl, Mode::Train, rng, true)?;
        let loss = mean_loss(&z, labels);
        let (b, o) = (z.nrows(), z.ncols());
        let norm = 1.0 / (b * o) as f64;
        let mut upstream = Array2::from_shape_fn((b, o), |(i, q)| (sigmoid(z[[i, q]]) - ((labels[i] >> q) & 1) as f64) * norm);
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.layers.len()];
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let cache = &caches[k];
            let wspec = self.weight_spec(k);
            let act = if self.quant_bypass { None } else { self.act_spec(k) };
            let bo = layer.plan.block_out();
            let u_deq = cache.u_lvl.mapv(|v| v * cache.s_u);
            let mut du: Option<Array2<f64>> = None;
            let mut tensors = Vec::new();
            for (bi, (blk, bc)) in layer.blocks.iter().zip(&cache.blocks).enumerate() {
                let mut dz = if layer.plan.hidden { upstream.slice(s![.., bi * bo..(bi + 1) * bo]).to_owned() } else { upstream.clone() };
                let mut bn_grads = None;
                if let Some(bn) = &blk.bn {
                    // Activation STE, ReLU, dropout.
                    let mut dy = dz;
                    for ((g, &yd), idx) in dy.iter_mut().zip(&bc.yd).zip(0..) {
                        let r = yd.max(0.0);
                        let pass = yd > 0.0 && act.is_none_or(|a| a.ste_passes(r));
                        if !pass {
                            *g = 0.0;
                        } else if let Some(m) = &bc.drop_mask {
                            *g *= m.as_slice().expect("standard layout")[idx];
                        }
                    }
                    let dgamma = (&dy * &bc.xhat).sum_axis(Axis(0));
                    let dbeta = dy.sum_axis(Axis(0));
                    let dxhat = &dy * &bn.gamma;
                    let n = dy.nrows() as f64;
                    let sum_dxhat = dxhat.sum_axis(Axis(0));
                    let sum_dxhat_xhat = (&dxhat * &bc.xhat).sum_axis(Axis(0));
                    dz = Array2::from_shape_fn(dxhat.raw_dim(), |(i, j)| {
                        bc.inv_std[j] / n * (n * dxhat[[i, j]] - sum_dxhat[j] - bc.xhat[[i, j]] * sum_dxhat_xhat[j])
                    });
                    bn_grads = Some((dgamma.to_vec(), dbeta.to_vec()));
                }
                let mut dw = dz.t().dot(&u_deq);
                if !self.quant_bypass && wspec.bits <= 2 {
                    // Max-abs scaling never clips, so only one- and two-bit
                    // weights are masked.
                    for (g, &w) in dw.iter_mut().zip(&blk.weight) {
                        if !wspec.ste_passes(w) {
                            *g = 0.0;
                        }
                    }
                }
                let db = dz.sum_axis(Axis(0));
                tensors.push(dw.into_raw_vec_and_offset().0);
                tensors.push(db.to_vec());
                if let Some((g, bt)) = bn_grads {
                    tensors.push(g);
                    tensors.push(bt);
                }
                if k > 0 && layer.plan.prev_dim > 0 {
                    let wq = bc.w_lvl.mapv(|v| v * cache.s_w);
                    let part = dz.dot(&wq);
                    du = Some(match du {
                        Some(acc) => acc + part,
                        None => part,
                    });
                }
            }
            per_layer[k] = tensors;
            if let Some(du) = du {
                upstream = du.slice(s![.., 0..layer.plan.prev_dim]).to_owned();
            }
        }
        Ok((loss, Gradients { tensors: per_layer.into_iter().flatten().collect() }, caches))
    }
}

fn mean_loss(z: &Array2<f64>, labels: &[u32]) -> f64 {
    let total: f64 = z.rows().into_iter().zip(labels).map(|(r, &l)| loss(r.as_slice().expect("row-major"), l)).sum();
    total / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub val_split: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr0: 1e-3,
            weight_decay: 1e-3,
            batch_size: 1024,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            val_split: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return domain("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return domain("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_split) {
            return domain(format!("validation split {} outside [0, 1)", self.val_split));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || self.weight_decay < 0.0 {
            return domain("learning rate must be positive and weight decay non-negative");
        }
        Ok(())
    }

    /// `lr0 * (1 - e / E)` for zero-based epoch `e`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * (1.0 - epoch as f64 / self.epochs as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_fgm: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss,val_fgm\n");
        for e in &self.epochs {
            let v = e.val_fgm.map_or(String::new(), |v| format!("{v}"));
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, e.loss, v));
        }
        s
    }
}

struct Adam {
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(model: &QnnModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.param_tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }

    fn step(&mut self, model: &mut QnnModel, grads: &Gradients, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let mask = model.weight_tensor_mask();
        for (ti, p) in model.param_tensors_mut().into_iter().enumerate() {
            let decay = if mask[ti] { cfg.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[ti], &mut self.v[ti], &grads.tensors[ti]);
            for i in 0..p.len() {
                let gi = g[i] + decay * p[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: QnnModel,
    pub history: TrainHistory,
}

/// Trains on boxcar features of `ds`.
pub fn train(model: QnnModel, ds: &Dataset, boxcar_window: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if ds.shots.is_empty() {
        return domain("empty training dataset");
    }
    let x = boxcar_features(&ds.shots, boxcar_window)?;
    let mut model = model;
    model.boxcar_window = boxcar_window;
    train_features(model, x.view(), &ds.labels(), cfg)
}

/// Trains on a precomputed feature matrix.
pub fn train_features(mut model: QnnModel, x: ArrayView2<f64>, labels: &[u32], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if x.ncols() != model.n_inputs() {
        return Err(Error::Shape { expected: model.n_inputs(), got: x.ncols() });
    }
    if labels.len() != x.nrows() || labels.is_empty() {
        return Err(Error::Shape { expected: x.nrows(), got: labels.len() });
    }
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(1);
    let mut shuffle_rng = split_rng.clone();
    shuffle_rng.set_stream(2);
    let mut drop_rng = split_rng.clone();
    drop_rng.set_stream(3);

    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.shuffle(&mut split_rng);
    let n_val = (cfg.val_split * labels.len() as f64).round() as usize;
    let (val_idx, train_idx) = idx.split_at(n_val.min(labels.len() - 1));
    let x_train = x.select(Axis(0), train_idx);
    let y_train: Vec<u32> = train_idx.iter().map(|&i| labels[i]).collect();
    let x_val = x.select(Axis(0), val_idx);
    let y_val: Vec<u32> = val_idx.iter().map(|&i| labels[i]).collect();

    model.calibrate_input(x_train.view())?;
    let x_lvl = model.quantize_input(x_train.view())?;
    let mut adam = Adam::new(&model);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..y_train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut n_batches) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let xb = x_lvl.select(Axis(0), batch);
            let yb: Vec<u32> = batch.iter().map(|&i| y_train[i]).collect();
            let (l, grads, caches) = model.step_grads(&xb, &yb, &mut drop_rng)?;
            update_running_stats(&mut model, &caches, batch.len());
            adam.step(&mut model, &grads, lr, cfg);
            loss_sum += l;
            n_batches += 1;
        }
        if n_batches == 0 {
            return domain("training split has fewer than 2 shots");
        }
        let val_fgm = if y_val.is_empty() {
            None
        } else {
            let preds = model.predict(x_val.view())?;
            fidelity(&y_val, &preds, model.n_outputs()).ok().map(|r| r.f_gm)
        };
        log::debug!("epoch {epoch}: lr {lr:.3e} loss {:.5} val F_GM {val_fgm:?}", loss_sum / n_batches as f64);
        history.epochs.push(EpochRecord { epoch, lr, loss: loss_sum / n_batches as f64, val_fgm });
    }
    Ok(TrainOutcome { model, history })
}

fn update_running_stats(model: &mut QnnModel, caches: &[LayerCache], batch: usize) {
    let unbias = batch as f64 / (batch as f64 - 1.0);
    for (layer, cache) in model.layers.iter_mut().zip(caches) {
        for (blk, bc) in layer.blocks.iter_mut().zip(&cache.blocks) {
            if let Some(bn) = &mut blk.bn {
                let m = bn.momentum;
                for j in 0..bn.gamma.len() {
                    bn.running_mean[j] = (1.0 - m) * bn.running_mean[j] + m * bc.batch_mean[j];
                    bn.running_var[j] = (1.0 - m) * bn.running_var[j] + m * bc.batch_var[j] * unbias;
                }
            }
        }
    }
}

const QNM_MAGIC: &[u8; 4] = b"QNM1";

pub(crate) fn write_arch<W: Write>(w: &mut W, a: &ArchSpec) -> Result<()> {
    binio::write_u8(w, a.kind.code())?;
    binio::write_len(w, a.layer_dims.len())?;
    for &d in &a.layer_dims {
        binio::write_len(w, d)?;
    }
    binio::write_len(w, a.n_segments)?;
    binio::write_len(w, a.piece_len)?;
    binio::write_u8(w, a.input_bits)?;
    binio::write_u8(w, a.weight_bits)?;
    binio::write_u8(w, a.act_bits)?;
    binio::write_u8(w, a.input_signedness.code())?;
    binio::write_f64(w, a.dropout_p)
}

pub(crate) fn read_arch<R: Read>(r: &mut R) -> Result<ArchSpec> {
    let kind = ArchKind::from_code(binio::read_u8(r)?)?;
    let n = binio::read_len(r)?;
    let layer_dims = (0..n).map(|_| binio::read_len(r)).collect::<Result<_>>()?;
    let spec = ArchSpec {
        kind,
        layer_dims,
        n_segments: binio::read_len(r)?,
        piece_len: binio::read_len(r)?,
        input_bits: binio::read_u8(r)?,
        weight_bits: binio::read_u8(r)?,
        act_bits: binio::read_u8(r)?,
        input_signedness: Signedness::from_code(binio::read_u8(r)?)?,
        dropout_p: binio::read_f64(r)?,
    };
    spec.validate()?;
    Ok(spec)
}

/// QNM1: arch fields, boxcar window, bypass flag, input QuantSpec, then
/// per layer and block: weights (f64 row-major), bias, batch norm
/// `(gamma, beta, mean, var, momentum, eps)` when hidden; per layer the
/// weight QuantSpec and, when hidden, the activation QuantSpec.
pub fn write_model<W: Write>(w: &mut W, m: &QnnModel) -> Result<()> {
    binio::write_magic(w, QNM_MAGIC, 1)?;
    write_arch(w, &m.arch)?;
    binio::write_len(w, m.boxcar_window)?;
    binio::write_u8(w, m.quant_bypass as u8)?;
    write_quant_spec(w, &m.input_spec)?;
    for (k, layer) in m.layers.iter().enumerate() {
        for blk in &layer.blocks {
            binio::write_f64_slice(w, blk.weight.as_slice().expect("standard layout"))?;
            binio::write_f64_slice(w, blk.bias.as_slice().expect("standard layout"))?;
            if let Some(bn) = &blk.bn {
                for t in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                    binio::write_f64_slice(w, t.as_slice().expect("standard layout"))?;
                }
                binio::write_f64(w, bn.momentum)?;
                binio::write_f64(w, bn.eps)?;
            }
        }
        write_quant_spec(w, &m.weight_spec(k))?;
        if let Some(a) = m.act_spec(k) {
            write_quant_spec(w, &a)?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<QnnModel> {
    binio::read_magic(r, QNM_MAGIC)?;
    let arch = read_arch(r)?;
    let mut m = build_model(&arch, 0)?;
    m.boxcar_window = binio::read_len(r)?;
    m.quant_bypass = binio::read_u8(r)? != 0;
    m.input_spec = read_quant_spec(r)?;
    for k in 0..m.layers.len() {
        for blk in &mut m.layers[k].blocks {
            let (rows, cols) = blk.weight.dim();
            blk.weight = Array2::from_shape_vec((rows, cols), binio::read_f64_vec(r, rows * cols)?).expect("shape");
            blk.bias = Array1::from(binio::read_f64_vec(r, rows)?);
            if let Some(bn) = &mut blk.bn {
                bn.gamma = Array1::from(binio::read_f64_vec(r, rows)?);
                bn.beta = Array1::from(binio::read_f64_vec(r, rows)?);
                bn.running_mean = Array1::from(binio::read_f64_vec(r, rows)?);
                bn.running_var = Array1::from(binio::read_f64_vec(r, rows)?);
                bn.momentum = binio::read_f64(r)?;
                bn.eps = binio::read_f64(r)?;
                if let Some(j) = bn.running_var.iter().position(|v| (v + bn.eps).is_nan() || v + bn.eps <= 0.0) {
                    return Err(Error::Format(format!("layer {k} neuron {j}: non-positive variance")));
                }
            }
        }
        let stored = read_quant_spec(r)?;
        if stored != m.weight_spec(k) {
            return Err(Error::Format(format!("layer {k}: stored weight quantizer disagrees with weights")));
        }
        if m.act_spec(k).is_some() && read_quant_spec(r)? != m.act_spec(k).expect("hidden") {
            return Err(Error::Format(format!("layer {k}: stored activation quantizer disagrees with architecture")));
        }
    }
    Ok(m)
}
