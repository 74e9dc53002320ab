//! Integer-only threshold networks compiled from trained models, and a
//! cycle model for PE/SIMD-folded streaming execution.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::classical::{read_quant_spec, write_quant_spec};
use crate::error::{domain, Error, Result};
use crate::qnn::{affine, bn_eval, predict_states, read_arch, write_arch, ArchKind, ArchSpec, LayerPlan, QnnModel};
use crate::quant::QuantSpec;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    /// Per-neuron nondecreasing thresholds; the output level is the number
    /// of thresholds `<=` the accumulator.
    Threshold { thresholds: Vec<Vec<i64>> },
    /// `logit = acc * scale + bias`.
    Affine { scale: f64, bias: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TnLayer {
    pub plan: LayerPlan,
    /// One `out x in` level matrix per block. Rows of neurons whose
    /// batch-norm gain is negative are stored negated.
    pub weights: Vec<Array2<i32>>,
    pub op: LayerOp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdNetwork {
    pub arch: ArchSpec,
    pub input_spec: QuantSpec,
    pub layers: Vec<TnLayer>,
}

/// Largest |input level| to each layer, given the stage's sources.
fn input_level_bound(input: &QuantSpec, act_max: i64, plan: &LayerPlan) -> i64 {
    let x = input.max_level().unsigned_abs().max(input.min_level().unsigned_abs()) as i64;
    match (plan.prev_dim > 0, plan.fresh.is_some()) {
        (true, true) => x.max(act_max),
        (true, false) => act_max,
        _ => x,
    }
}

struct NeuronFn<'a> {
    c: f64,
    bias: f64,
    gamma: f64,
    beta: f64,
    mean: f64,
    var: f64,
    eps: f64,
    act: &'a QuantSpec,
    /// Evaluate at `-a` (negated row).
    flip: bool,
}

impl NeuronFn<'_> {
    /// Exactly the reference model's eval-mode level for accumulator `a`.
    fn level(&self, a: i64) -> i32 {
        let a = if self.flip { -a } else { a };
        let z = affine(a as f64, self.c, self.bias);
        let y = bn_eval(z, self.gamma, self.beta, self.mean, self.var, self.eps);
        self.act.level(y.max(0.0))
    }
}

/// Smallest `a` in `[lo, hi]` with `f.level(a) >= k`, or `i64::MAX` if none,
/// `i64::MIN` if every value qualifies. `guess` seeds a local search.
fn threshold(f: &NeuronFn, k: i32, lo: i64, hi: i64, guess: f64) -> i64 {
    if f.level(lo) >= k {
        return i64::MIN;
    }
    if f.level(hi) < k {
        return i64::MAX;
    }
    // Invariant: level(l) < k <= level(h).
    let (mut l, mut h) = (lo, hi);
    if guess.is_finite() {
        let g = (guess.ceil() as i64).clamp(lo + 1, hi);
        // Nudge into a tight bracket around the closed-form estimate.
        if f.level(g) >= k {
            h = g;
            if f.level(g - 1) < k {
                return g;
            }
        } else {
            l = g;
            if g < hi && f.level(g + 1) >= k {
                return g + 1;
            }
        }
    }
    while h - l > 1 {
        let m = l + (h - l) / 2;
        if f.level(m) >= k {
            h = m
        } else {
            l = m
        }
    }
    h
}

/// Compiles an eval-mode model into an integer threshold network.
pub fn compile_thresholds(model: &QnnModel) -> Result<ThresholdNetwork> {
    if model.quant_bypass {
        return domain("cannot compile a model with quantizers bypassed");
    }
    let input = model.input_spec;
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut act_max = 0i64;
    for (k, layer) in model.layers.iter().enumerate() {
        let plan = layer.plan.clone();
        let c = model.input_scale(k) * model.weight_spec(k).scale;
        let mut weights = model.weight_levels(k);
        let ubound = input_level_bound(&input, act_max, &plan) as i128;
        for (bi, w) in weights.iter().enumerate() {
            for (j, row) in w.rows().into_iter().enumerate() {
                let s: i128 = row.iter().map(|&v| v.unsigned_abs() as i128).sum::<i128>() * ubound;
                if s > i64::MAX as i128 {
                    return Err(Error::Overflow(format!("layer {k} block {bi} neuron {j}: accumulator bound {s}")));
                }
            }
        }
        let op = match model.act_spec(k) {
            None => LayerOp::Affine { scale: c, bias: layer.blocks[0].bias.to_vec() },
            Some(act) => {
                let mut thresholds = Vec::with_capacity(plan.out_dim);
                for (bi, blk) in layer.blocks.iter().enumerate() {
                    let bn = blk.bn.as_ref().expect("hidden block has batch norm");
                    for j in 0..blk.bias.len() {
                        let name = format!("layer {k} block {bi} neuron {j}");
                        let denom = bn.running_var[j] + bn.eps;
                        if denom.is_nan() || denom <= 0.0 {
                            return Err(Error::Degenerate(format!("{name}: variance + eps = {denom} is not positive")));
                        }
                        let gamma = bn.gamma[j];
                        if !gamma.is_finite() {
                            return Err(Error::Degenerate(format!("{name}: non-finite gain")));
                        }
                        let flip = gamma < 0.0;
                        if flip {
                            weights[bi].row_mut(j).mapv_inplace(|v| -v);
                        }
                        let f = NeuronFn {
                            c,
                            bias: blk.bias[j],
                            gamma,
                            beta: bn.beta[j],
                            mean: bn.running_mean[j],
                            var: bn.running_var[j],
                            eps: bn.eps,
                            act: &act,
                            flip,
                        };
                        let bound: i64 = weights[bi].row(j).iter().map(|&v| v.unsigned_abs() as i64).sum::<i64>() * ubound as i64;
                        // y = a A + c0 in the (possibly flipped) accumulator.
                        let sd = denom.sqrt();
                        let a = gamma.abs() * c / sd;
                        let c0 = gamma * (blk.bias[j] - bn.running_mean[j]) / sd + bn.beta[j];
                        let t: Vec<i64> = (1..act.n_levels() as i32)
                            .map(|lvl| {
                                let guess = ((lvl as f64 - 0.5) * act.scale - c0) / a;
                                threshold(&f, lvl, -bound, bound, guess)
                            })
                            .collect();
                        thresholds.push(t);
                    }
                }
                act_max = act.max_level() as i64;
                LayerOp::Threshold { thresholds }
            }
        };
        layers.push(TnLayer { plan, weights, op });
    }
    Ok(ThresholdNetwork { arch: model.arch.clone(), input_spec: input, layers })
}

impl ThresholdNetwork {
    pub fn n_inputs(&self) -> usize {
        self.arch.n_inputs()
    }

    /// Input levels of a real feature vector.
    pub fn quantize_input(&self, features: &[f64]) -> Vec<i32> {
        features.iter().map(|&x| self.input_spec.level(x)).collect()
    }

    /// Hidden levels of every layer plus the output logits.
    pub fn trace(&self, input_levels: &[i32]) -> Result<(Vec<Vec<i32>>, Vec<f64>)> {
        if input_levels.len() != self.n_inputs() {
            return Err(Error::Shape { expected: self.n_inputs(), got: input_levels.len() });
        }
        if let Some(i) = input_levels.iter().position(|&l| !self.input_spec.contains(l)) {
            return domain(format!("input level {} at index {i} outside the input quantizer", input_levels[i]));
        }
        let mut prev: Vec<i32> = Vec::new();
        let mut hidden = Vec::new();
        for layer in &self.layers {
            let plan = &layer.plan;
            let mut u: Vec<i64> = Vec::with_capacity(plan.in_dim);
            if plan.prev_dim > 0 {
                u.extend(prev.iter().map(|&v| v as i64));
            }
            if let Some(r) = &plan.fresh {
                u.extend(input_levels[r.clone()].iter().map(|&v| v as i64));
            }
            let accs: Vec<i64> = layer
                .weights
                .iter()
                .flat_map(|w| {
                    w.rows().into_iter().map(|row| row.iter().zip(&u).map(|(&a, &b)| a as i64 * b).sum::<i64>()).collect::<Vec<_>>()
                })
                .collect();
            match &layer.op {
                LayerOp::Threshold { thresholds } => {
                    prev = accs.iter().zip(thresholds).map(|(&a, t)| t.iter().filter(|&&th| th <= a).count() as i32).collect();
                    hidden.push(prev.clone());
                }
                LayerOp::Affine { scale, bias } => {
                    let logits = accs.iter().zip(bias).map(|(&a, &b)| affine(a as f64, *scale, b)).collect();
                    return Ok((hidden, logits));
                }
            }
        }
        domain("network has no output layer")
    }

    pub fn int_forward(&self, input_levels: &[i32]) -> Result<Vec<f64>> {
        Ok(self.trace(input_levels)?.1)
    }

    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Vec<u32>> {
        (0..features.nrows())
            .into_par_iter()
            .map(|i| {
                let lv = self.quantize_input(&features.row(i).to_vec());
                Ok(predict_states(&self.int_forward(&lv)?))
            })
            .collect()
    }
}

pub fn int_forward(tn: &ThresholdNetwork, input_levels: &[i32]) -> Result<Vec<f64>> {
    tn.int_forward(input_levels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub n_checked: usize,
    pub mismatches: usize,
    pub first_mismatch: Option<usize>,
    pub max_abs_logit_diff: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// Compares integer inference against the model's eval-mode forward pass
/// on every row. A row mismatches unless all logits are bit-identical.
pub fn check_equivalence(model: &QnnModel, tn: &ThresholdNetwork, features: ArrayView2<f64>) -> Result<EquivalenceReport> {
    let reference = model.logits(features)?;
    let results: Vec<(bool, f64)> = (0..features.nrows())
        .into_par_iter()
        .map(|i| {
            let want = reference.row(i);
            let lv = tn.quantize_input(&features.row(i).to_vec());
            let got = tn.int_forward(&lv)?;
            let diff = got.iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let same = got.iter().zip(want.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            Ok((same, diff))
        })
        .collect::<Result<_>>()?;
    let first_mismatch = results.iter().position(|r| !r.0);
    Ok(EquivalenceReport {
        n_checked: results.len(),
        mismatches: results.iter().filter(|r| !r.0).count(),
        first_mismatch,
        max_abs_logit_diff: results.iter().map(|r| r.1).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFold {
    pub pe: usize,
    pub simd: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldingConfig {
    pub layers: Vec<LayerFold>,
    pub streaming_overlap: bool,
    pub pipeline_overhead_cycles: u64,
    pub clock_mhz: f64,
}

pub const DEFAULT_CLOCK_MHZ: f64 = 250.0;

impl FoldingConfig {
    /// One PE per neuron (per segment) and one SIMD lane per input.
    pub fn fully_parallel(arch: &ArchSpec) -> Result<Self> {
        let layers = arch.plan()?.iter().map(|l| LayerFold { pe: l.block_out(), simd: l.in_dim }).collect();
        Ok(Self { layers, streaming_overlap: arch.kind == ArchKind::Piecewise, pipeline_overhead_cycles: 1, clock_mhz: DEFAULT_CLOCK_MHZ })
    }

    /// Fully parallel except layer `layer` limited to `pe_cap` PEs.
    pub fn with_pe_cap(mut self, layer: usize, pe_cap: usize) -> Self {
        if let Some(l) = self.layers.get_mut(layer) {
            l.pe = l.pe.min(pe_cap);
        }
        self
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        let plan = arch.plan()?;
        if plan.len() != self.layers.len() {
            return domain(format!("folding lists {} layers, architecture has {}", self.layers.len(), plan.len()));
        }
        for (k, (l, f)) in plan.iter().zip(&self.layers).enumerate() {
            if f.pe == 0 || f.pe > l.block_out() {
                return domain(format!("layer {k}: PE {} outside 1..={}", f.pe, l.block_out()));
            }
            if f.simd == 0 || f.simd > l.in_dim {
                return domain(format!("layer {k}: SIMD {} outside 1..={}", f.simd, l.in_dim));
            }
        }
        if !(self.clock_mhz.is_finite() && self.clock_mhz > 0.0) {
            return domain("clock_mhz must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLatency {
    pub layer: usize,
    pub cycles: u64,
    pub on_critical_path: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub layers: Vec<LayerLatency>,
    pub total_cycles: u64,
    pub total_ns: f64,
    pub clock_mhz: f64,
}

impl LatencyReport {
    pub fn to_csv(&self) -> String {
        let ns = |c: u64| c as f64 * 1000.0 / self.clock_mhz;
        let mut s = String::from("layer,cycles,ns\n");
        for l in &self.layers {
            s.push_str(&format!("{},{},{}\n", l.layer, l.cycles, ns(l.cycles)));
        }
        s.push_str(&format!("total,{},{}\n", self.total_cycles, self.total_ns));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

/// Cycles per layer: `ceil(in / SIMD) * ceil(out / PE) + c_p`, with
/// parallel segments counted once. With streaming overlap, only layers
/// consuming the final input piece lie on the critical path.
pub fn estimate_latency(arch: &ArchSpec, folding: &FoldingConfig) -> Result<LatencyReport> {
    folding.validate(arch)?;
    let plan = arch.plan()?;
    let n_fresh = plan.iter().filter_map(|l| l.fresh.as_ref().map(|r| r.end)).max().unwrap_or(0);
    let overlap = folding.streaming_overlap && arch.kind == ArchKind::Piecewise;
    let layers: Vec<LayerLatency> = plan
        .iter()
        .zip(&folding.layers)
        .enumerate()
        .map(|(k, (l, f))| {
            let cycles = l.in_dim.div_ceil(f.simd) as u64 * l.block_out().div_ceil(f.pe) as u64 + folding.pipeline_overhead_cycles;
            // The layer fed by the last piece, and everything after it.
            let last_piece_seen = plan[..=k].iter().any(|p| p.fresh.as_ref().is_some_and(|r| r.end == n_fresh));
            LayerLatency { layer: k, cycles, on_critical_path: !overlap || last_piece_seen }
        })
        .collect();
    let total_cycles = layers.iter().filter(|l| l.on_critical_path).map(|l| l.cycles).sum();
    Ok(LatencyReport { layers, total_cycles, total_ns: total_cycles as f64 * 1000.0 / folding.clock_mhz, clock_mhz: folding.clock_mhz })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub layer: usize,
    pub n_blocks: usize,
    pub per_block: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacReport {
    pub layers: Vec<LayerMacs>,
    pub total: u64,
}

pub fn mac_count(arch: &ArchSpec) -> Result<MacReport> {
    let layers: Vec<LayerMacs> = arch
        .plan()?
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let per_block = (l.in_dim * l.block_out()) as u64;
            LayerMacs { layer: k, n_blocks: l.n_blocks, per_block, total: per_block * l.n_blocks as u64 }
        })
        .collect();
    let total = layers.iter().map(|l| l.total).sum();
    Ok(MacReport { layers, total })
}

const QTN_MAGIC: &[u8; 4] = b"QTN1";

/// QTN1: arch fields, input QuantSpec, then per layer and block
/// `i32` weight levels row-major; hidden layers follow with per-neuron
/// `u32 count, i64 thresholds`, the output layer with `f64 scale` and
/// `f64` biases.
pub fn write_qtn<W: Write>(w: &mut W, tn: &ThresholdNetwork) -> Result<()> {
    binio::write_magic(w, QTN_MAGIC, 1)?;
    write_arch(w, &tn.arch)?;
    write_quant_spec(w, &tn.input_spec)?;
    for layer in &tn.layers {
        for m in &layer.weights {
            for &v in m.iter() {
                binio::write_i32(w, v)?;
            }
        }
        match &layer.op {
            LayerOp::Threshold { thresholds } => {
                for t in thresholds {
                    binio::write_len(w, t.len())?;
                    for &v in t {
                        binio::write_i64(w, v)?;
                    }
                }
            }
            LayerOp::Affine { scale, bias } => {
                binio::write_f64(w, *scale)?;
                binio::write_f64_slice(w, bias)?;
            }
        }
    }
    Ok(())
}

pub fn read_qtn<R: Read>(r: &mut R) -> Result<ThresholdNetwork> {
    binio::read_magic(r, QTN_MAGIC)?;
    let arch = read_arch(r)?;
    let input_spec = read_quant_spec(r)?;
    let mut layers = Vec::new();
    for plan in arch.plan()? {
        let bo = plan.block_out();
        let weights = (0..plan.n_blocks)
            .map(|_| {
                let v = (0..bo * plan.in_dim).map(|_| binio::read_i32(r)).collect::<Result<Vec<_>>>()?;
                Ok(Array2::from_shape_vec((bo, plan.in_dim), v).expect("shape"))
            })
            .collect::<Result<Vec<_>>>()?;
        let op = if plan.hidden {
            let thresholds = (0..plan.out_dim)
                .map(|_| {
                    let n = binio::read_len(r)?;
                    let t = (0..n).map(|_| binio::read_i64(r)).collect::<Result<Vec<_>>>()?;
                    if t.windows(2).any(|p| p[0] > p[1]) {
                        return Err(Error::Format("thresholds are not sorted".into()));
                    }
                    Ok(t)
                })
                .collect::<Result<_>>()?;
            LayerOp::Threshold { thresholds }
        } else {
            LayerOp::Affine { scale: binio::read_f64(r)?, bias: binio::read_f64_vec(r, plan.out_dim)? }
        };
        layers.push(TnLayer { plan, weights, op });
    }
    Ok(ThresholdNetwork { arch, input_spec, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnn::build_model;

    #[test]
    fn preset_mac_counts() {
        let dense = mac_count(&ArchSpec::preset("arch5", 5).unwrap()).unwrap();
        assert_eq!(dense.layers[0].total, 32_768);
        let seg = mac_count(&ArchSpec::preset("arch7", 5).unwrap()).unwrap();
        assert_eq!((seg.layers[0].per_block, seg.layers[0].total), (4_096, 32_768));
        let min = mac_count(&ArchSpec::dense(vec![37, 3], (4, 2, 2))).unwrap();
        assert_eq!(min.total, 111);
    }

    #[test]
    fn single_layer_fully_parallel_is_two_cycles() {
        let a = ArchSpec::dense(vec![16, 3], (4, 2, 2));
        let r = estimate_latency(&a, &FoldingConfig::fully_parallel(&a).unwrap()).unwrap();
        assert_eq!(r.total_cycles, 2);
        assert_eq!(r.total_ns, 2.0 * 1000.0 / DEFAULT_CLOCK_MHZ);
    }

    #[test]
    fn folding_bounds_are_checked() {
        let a = ArchSpec::preset("arch5", 5).unwrap();
        let mut f = FoldingConfig::fully_parallel(&a).unwrap();
        f.layers[0].pe = 65;
        assert!(estimate_latency(&a, &f).is_err());
        f.layers[0].pe = 64;
        f.layers[1].simd = 0;
        assert!(estimate_latency(&a, &f).is_err());
    }

    #[test]
    fn overlap_counts_only_final_piece_layers() {
        let a = ArchSpec::preset("arch8", 5).unwrap();
        let mut f = FoldingConfig::fully_parallel(&a).unwrap();
        let on = estimate_latency(&a, &f).unwrap();
        assert_eq!(on.total_cycles, 2);
        f.streaming_overlap = false;
        assert_eq!(estimate_latency(&a, &f).unwrap().total_cycles, 10);
    }

    #[test]
    fn qtn_round_trip() {
        let m = build_model(&ArchSpec::preset("arch8", 5).unwrap(), 2).unwrap();
        let tn = compile_thresholds(&m).unwrap();
        let mut buf = Vec::new();
        write_qtn(&mut buf, &tn).unwrap();
        assert_eq!(read_qtn(&mut buf.as_slice()).unwrap(), tn);
    }
}
