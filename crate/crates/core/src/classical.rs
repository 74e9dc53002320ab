//! Classical discriminators: digital demodulation, boxcar thresholding,
//! the matched filter and a linear SVM with two 8-bit integer variants.

use std::io::{Read, Write};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{domain, Error, Result};
use crate::quant::{calibrate_scale, QuantSpec, Signedness};
use crate::synth::{tone, DeviceConfig, RawShot};

fn check_freq(f: f64, fs: f64) -> Result<()> {
    if !(fs > 0.0 && f > 0.0 && f < fs / 2.0) {
        return domain(format!("demodulation frequency {f} Hz outside (0, {})", fs / 2.0));
    }
    Ok(())
}

/// Per-sample demodulation coefficients `exp(-i 2 pi f n / fs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemodKernel {
    pub qubit: usize,
    pub coeffs: Vec<Complex64>,
}

impl DemodKernel {
    pub fn new(qubit: usize, f: f64, fs: f64, n_samples: usize) -> Result<Self> {
        check_freq(f, fs)?;
        Ok(Self { qubit, coeffs: tone(f, fs, n_samples, -1.0) })
    }

    pub fn apply(&self, shot: &RawShot) -> Result<Complex64> {
        if shot.n_samples() != self.coeffs.len() {
            return Err(Error::Shape { expected: self.coeffs.len(), got: shot.n_samples() });
        }
        Ok(self.coeffs.iter().enumerate().map(|(n, c)| shot.sample(n) * c).sum())
    }
}

/// `sum_n (I[n] + i Q[n]) exp(-i 2 pi f n / fs)`.
pub fn demodulate(shot: &RawShot, f: f64, fs: f64) -> Result<Complex64> {
    DemodKernel::new(0, f, fs, shot.n_samples())?.apply(shot)
}

fn split_by_bit(shots: &[RawShot], q: usize) -> Result<(Vec<&RawShot>, Vec<&RawShot>)> {
    let (ones, zeros): (Vec<_>, Vec<_>) = shots.iter().partition(|s| (s.label >> q) & 1 == 1);
    if zeros.is_empty() {
        return Err(Error::SingleClass { qubit: q, missing: 0 });
    }
    if ones.is_empty() {
        return Err(Error::SingleClass { qubit: q, missing: 1 });
    }
    Ok((zeros, ones))
}

fn check_trace_lengths(shots: &[RawShot]) -> Result<usize> {
    let n = shots.first().map(RawShot::n_samples).unwrap_or(0);
    if n == 0 {
        return domain("zero-length traces");
    }
    if let Some(bad) = shots.iter().find(|s| s.n_samples() != n || s.q_samples.len() != n) {
        return Err(Error::Shape { expected: n, got: bad.n_samples() });
    }
    Ok(n)
}

fn mean_trace(shots: &[&RawShot], n: usize) -> Vec<Complex64> {
    let mut acc = vec![Complex64::new(0.0, 0.0); n];
    for s in shots {
        for (k, a) in acc.iter_mut().enumerate() {
            *a += s.sample(k);
        }
    }
    let inv = 1.0 / shots.len() as f64;
    acc.iter().map(|a| a * inv).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedFilter {
    pub qubit: usize,
    /// `conj(mu1[n] - mu0[n])`.
    pub weights: Vec<Complex64>,
    pub threshold: f64,
}

impl MatchedFilter {
    /// `Re(sum_n w[n] s[n])`.
    pub fn statistic(&self, shot: &RawShot) -> f64 {
        self.weights.iter().enumerate().map(|(n, w)| (w * shot.sample(n)).re).sum()
    }

    pub fn decide(&self, shot: &RawShot) -> bool {
        self.statistic(shot) > self.threshold
    }

    /// Replaces the midpoint threshold, e.g. for ROC sweeps.
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }
}

/// Matched filter for qubit `q` from class-mean traces; threshold at the
/// midpoint of the projected class means.
pub fn mf_train(shots: &[RawShot], q: usize) -> Result<MatchedFilter> {
    let n = check_trace_lengths(shots)?;
    let (zeros, ones) = split_by_bit(shots, q)?;
    let mu0 = mean_trace(&zeros, n);
    let mu1 = mean_trace(&ones, n);
    let weights: Vec<Complex64> = mu1.iter().zip(&mu0).map(|(a, b)| (a - b).conj()).collect();
    if weights.iter().all(|w| w.norm_sqr() == 0.0) {
        return Err(Error::Degenerate(format!("qubit {q}: class means coincide, matched filter is zero")));
    }
    let proj = |mu: &[Complex64]| -> f64 { weights.iter().zip(mu).map(|(w, m)| (w * m).re).sum() };
    // The statistic is linear, so the projected class means are the
    // projections of the mean traces.
    let threshold = 0.5 * (proj(&mu0) + proj(&mu1));
    Ok(MatchedFilter { qubit: q, weights, threshold })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedFilterBank {
    pub filters: Vec<MatchedFilter>,
}

impl MatchedFilterBank {
    pub fn train(shots: &[RawShot], n_qubits: usize) -> Result<Self> {
        let filters = (0..n_qubits).into_par_iter().map(|q| mf_train(shots, q)).collect::<Result<_>>()?;
        Ok(Self { filters })
    }

    pub fn discriminate(&self, shot: &RawShot) -> u32 {
        mf_discriminate(self, shot)
    }
}

/// Bit q set iff `d_q > t_q`.
pub fn mf_discriminate(bank: &MatchedFilterBank, shot: &RawShot) -> u32 {
    bank.filters.iter().fold(0, |acc, f| acc | ((f.decide(shot) as u32) << f.qubit))
}

/// Boxcar (uniform-window) integration at each qubit's IF, thresholded on
/// the perpendicular bisector of the two class means in the IQ plane.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxcarDiscriminator {
    pub kernels: Vec<DemodKernel>,
    pub mean0: Vec<Complex64>,
    pub mean1: Vec<Complex64>,
}

impl BoxcarDiscriminator {
    pub fn train(shots: &[RawShot], device: &DeviceConfig) -> Result<Self> {
        let n = check_trace_lengths(shots)?;
        let mut kernels = Vec::new();
        let mut mean0 = Vec::new();
        let mut mean1 = Vec::new();
        for (q, cfg) in device.qubits.iter().enumerate() {
            let k = DemodKernel::new(q, cfg.if_freq_hz, device.sample_rate_hz, n)?;
            let (zeros, ones) = split_by_bit(shots, q)?;
            let avg = |set: &[&RawShot]| -> Result<Complex64> {
                let mut acc = Complex64::new(0.0, 0.0);
                for s in set {
                    acc += k.apply(s)?;
                }
                Ok(acc / set.len() as f64)
            };
            mean0.push(avg(&zeros)?);
            mean1.push(avg(&ones)?);
            kernels.push(k);
        }
        Ok(Self { kernels, mean0, mean1 })
    }

    pub fn discriminate(&self, shot: &RawShot) -> Result<u32> {
        boxcar_discriminate(self, shot)
    }
}

pub fn boxcar_discriminate(bf: &BoxcarDiscriminator, shot: &RawShot) -> Result<u32> {
    let mut out = 0;
    for (q, k) in bf.kernels.iter().enumerate() {
        let z = k.apply(shot)?;
        let mid = 0.5 * (bf.mean0[q] + bf.mean1[q]);
        let axis = bf.mean1[q] - bf.mean0[q];
        if ((z - mid) * axis.conj()).re > 0.0 {
            out |= 1 << q;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { lambda: 1e-4, epochs: 20, seed: 0 }
    }
}

/// Linear SVM over the raw `[I || Q]` trace.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub qubit: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub trained: bool,
}

impl LinearSvm {
    pub fn score(&self, shot: &RawShot) -> f64 {
        let n = shot.n_samples();
        let (wi, wq) = self.weights.split_at(n);
        let mut s = self.bias;
        for k in 0..n {
            s += wi[k] * shot.i_samples[k] as f64 + wq[k] * shot.q_samples[k] as f64;
        }
        s
    }

    pub fn decide(&self, shot: &RawShot) -> bool {
        self.score(shot) > 0.0
    }

    /// Multiplies `(w, b)` by `c`; decisions are invariant for `c > 0`.
    pub fn rescaled(&self, c: f64) -> Self {
        Self { weights: self.weights.iter().map(|w| w * c).collect(), bias: self.bias * c, ..self.clone() }
    }
}

/// Pegasos stochastic subgradient descent on
/// `lambda/2 |w|^2 + mean_i max(0, 1 - y_i (w . x_i + b))` with step
/// `1 / (lambda t)`. The bias is learned as the weight of a constant unit
/// feature. The returned model is the average of the iterates over the
/// final epoch.
pub fn svm_train(shots: &[RawShot], q: usize, cfg: &SvmConfig) -> Result<LinearSvm> {
    let n = check_trace_lengths(shots)?;
    split_by_bit(shots, q)?;
    if !(cfg.lambda > 0.0 && cfg.lambda.is_finite()) {
        return domain("SVM lambda must be positive");
    }
    if cfg.epochs == 0 {
        return domain("SVM epochs must be at least 1");
    }
    let d = 2 * n + 1;
    let mut w = vec![0.0f64; d];
    let mut avg = vec![0.0f64; d];
    let mut order: Vec<usize> = (0..shots.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (q as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut x = vec![0.0f64; d];
    let mut t: u64 = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let last = epoch + 1 == cfg.epochs;
        for &i in &order {
            let shot = &shots[i];
            for k in 0..n {
                x[k] = shot.i_samples[k] as f64;
                x[n + k] = shot.q_samples[k] as f64;
            }
            x[2 * n] = 1.0;
            let y = if (shot.label >> q) & 1 == 1 { 1.0 } else { -1.0 };
            t += 1;
            let eta = 1.0 / (cfg.lambda * t as f64);
            let margin = y * dot(&w, &x);
            let shrink = 1.0 - eta * cfg.lambda;
            if margin < 1.0 {
                let step = eta * y;
                for (wk, xk) in w.iter_mut().zip(&x) {
                    *wk = shrink * *wk + step * xk;
                }
            } else {
                w.iter_mut().for_each(|wk| *wk *= shrink);
            }
            if last {
                for (a, wk) in avg.iter_mut().zip(&w) {
                    *a += wk;
                }
            }
        }
    }
    let inv = 1.0 / shots.len() as f64;
    avg.iter_mut().for_each(|a| *a *= inv);
    let bias = avg.pop().expect("bias slot");
    Ok(LinearSvm { qubit: q, weights: avg, bias, lambda: cfg.lambda, trained: true })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmBank {
    pub svms: Vec<LinearSvm>,
}

impl SvmBank {
    pub fn train(shots: &[RawShot], n_qubits: usize, cfg: &SvmConfig) -> Result<Self> {
        let svms = (0..n_qubits).into_par_iter().map(|q| svm_train(shots, q, cfg)).collect::<Result<_>>()?;
        Ok(Self { svms })
    }

    pub fn discriminate(&self, shot: &RawShot) -> u32 {
        self.svms.iter().fold(0, |acc, s| acc | ((s.decide(shot) as u32) << s.qubit))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SvmVariant {
    /// Demodulate with quantized coefficients, then multiply by quantized
    /// per-sample weights.
    TwoMultiplier,
    /// One multiply per sample with precomputed weight-times-demodulation
    /// coefficients.
    Fused,
}

/// One qubit's integer SVM.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSvm {
    pub qubit: usize,
    pub variant: SvmVariant,
    pub input_spec: QuantSpec,
    /// Two-multiplier: demodulated-domain weights `V = W c` as (re, im)
    /// levels. Fused: `quantize(V conj(c))` levels.
    pub weight_re: Vec<i32>,
    pub weight_im: Vec<i32>,
    pub weight_spec: QuantSpec,
    /// Two-multiplier only: demodulation coefficient levels.
    pub demod_re: Vec<i32>,
    pub demod_im: Vec<i32>,
    pub demod_spec: Option<QuantSpec>,
    pub bias: f64,
    /// Float reference path with every quantizer disabled.
    pub bypass: Option<BypassCoeffs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BypassCoeffs {
    pub weights: Vec<Complex64>,
    pub demod: Vec<Complex64>,
}

const SVM_BITS: u8 = 8;

/// 8-bit signed input quantizer calibrated on `[I || Q]` samples.
pub fn calibrate_svm_input(shots: &[RawShot], percentile: f64) -> Result<QuantSpec> {
    let samples: Vec<f64> = shots.iter().flat_map(|s| s.i_samples.iter().chain(&s.q_samples).map(|&x| x as f64)).collect();
    Ok(calibrate_scale(&samples, SVM_BITS, Signedness::SignedSymmetric, percentile)?.spec)
}

fn max_abs_spec(values: impl Iterator<Item = f64>) -> Result<QuantSpec> {
    let m = values.fold(0.0f64, |m, v| m.max(v.abs()));
    let probe = QuantSpec::signed(SVM_BITS, 1.0)?;
    let scale = if m > 0.0 { m / probe.max_level() as f64 } else { 1.0 };
    QuantSpec::signed(SVM_BITS, scale)
}

/// Builds the integer SVM for `svm`. `f`/`fs` define the demodulation
/// coefficients. With `bypass`, decisions are computed in floating point
/// with no quantization (a debug path for checking the algebra).
pub fn svm_quantize(svm: &LinearSvm, variant: SvmVariant, input_spec: QuantSpec, f: f64, fs: f64, bypass: bool) -> Result<QuantizedSvm> {
    if !svm.trained {
        return domain("SVM is not trained");
    }
    let n = svm.weights.len() / 2;
    let demod = DemodKernel::new(svm.qubit, f, fs, n)?.coeffs;
    let w: Vec<Complex64> = (0..n).map(|k| Complex64::new(svm.weights[k], svm.weights[n + k])).collect();
    // Re(conj(V) (s c)) = Re(conj(W) s) when V = W c and |c| = 1.
    let v: Vec<Complex64> = w.iter().zip(&demod).map(|(w, c)| w * c).collect();
    let coeffs: Vec<Complex64> = match variant {
        SvmVariant::TwoMultiplier => v.clone(),
        SvmVariant::Fused => v.iter().zip(&demod).map(|(v, c)| v * c.conj()).collect(),
    };
    let weight_spec = max_abs_spec(coeffs.iter().flat_map(|c| [c.re, c.im]))?;
    let (demod_re, demod_im, demod_spec) = match variant {
        SvmVariant::TwoMultiplier => {
            let spec = max_abs_spec(demod.iter().flat_map(|c| [c.re, c.im]))?;
            (demod.iter().map(|c| spec.level(c.re)).collect(), demod.iter().map(|c| spec.level(c.im)).collect(), Some(spec))
        }
        SvmVariant::Fused => (Vec::new(), Vec::new(), None),
    };
    Ok(QuantizedSvm {
        qubit: svm.qubit,
        variant,
        input_spec,
        weight_re: coeffs.iter().map(|c| weight_spec.level(c.re)).collect(),
        weight_im: coeffs.iter().map(|c| weight_spec.level(c.im)).collect(),
        weight_spec,
        demod_re,
        demod_im,
        demod_spec,
        bias: svm.bias,
        bypass: bypass.then_some(BypassCoeffs { weights: coeffs, demod }),
    })
}

/// Worst-case |accumulator| for `n_samples` with 8-bit operands.
pub fn svm_accumulator_bound(variant: SvmVariant, n_samples: u64) -> u128 {
    let l = 127u128;
    let per_sample = match variant {
        // |VR (xI cR - xQ cI) + VI (xI cI + xQ cR)| <= 2 l * 2 l^2
        SvmVariant::TwoMultiplier => 4 * l * l * l,
        // |FR xI + FI xQ| <= 2 l^2
        SvmVariant::Fused => 2 * l * l,
    };
    per_sample * n_samples as u128
}

impl QuantizedSvm {
    /// Exact integer accumulator for a shot.
    pub fn accumulate(&self, shot: &RawShot) -> i64 {
        let n = self.weight_re.len();
        let spec = &self.input_spec;
        let mut acc: i64 = 0;
        for k in 0..n {
            let xi = spec.level(shot.i_samples[k] as f64) as i64;
            let xq = spec.level(shot.q_samples[k] as f64) as i64;
            let (vr, vi) = (self.weight_re[k] as i64, self.weight_im[k] as i64);
            acc += match self.variant {
                SvmVariant::TwoMultiplier => {
                    let (cr, ci) = (self.demod_re[k] as i64, self.demod_im[k] as i64);
                    let dr = xi * cr - xq * ci;
                    let di = xi * ci + xq * cr;
                    vr * dr + vi * di
                }
                SvmVariant::Fused => vr * xi + vi * xq,
            };
        }
        acc
    }

    /// Combined scale mapping the accumulator back to the float score.
    pub fn accumulator_scale(&self) -> f64 {
        let demod = self.demod_spec.map_or(1.0, |s| s.scale);
        self.input_spec.scale * self.weight_spec.scale * demod
    }

    pub fn score(&self, shot: &RawShot) -> f64 {
        if let Some(b) = &self.bypass {
            let mut s = self.bias;
            for (k, w) in b.weights.iter().enumerate() {
                let x = shot.sample(k);
                s += match self.variant {
                    SvmVariant::TwoMultiplier => (w.conj() * (x * b.demod[k])).re,
                    SvmVariant::Fused => (w.conj() * x).re,
                };
            }
            return s;
        }
        self.accumulate(shot) as f64 * self.accumulator_scale() + self.bias
    }

    pub fn decide(&self, shot: &RawShot) -> bool {
        if self.bypass.is_some() {
            return self.score(shot) > 0.0;
        }
        // acc * scale + b > 0  <=>  acc > -b / scale
        (self.accumulate(shot) as f64) > -self.bias / self.accumulator_scale()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSvmBank {
    pub svms: Vec<QuantizedSvm>,
}

impl QuantizedSvmBank {
    pub fn new(bank: &SvmBank, device: &DeviceConfig, variant: SvmVariant, input_spec: QuantSpec, bypass: bool) -> Result<Self> {
        let n = bank.svms.first().map_or(0, |s| s.weights.len() / 2) as u64;
        if svm_accumulator_bound(variant, n) > i64::MAX as u128 {
            return Err(Error::Overflow(format!("{variant:?} SVM over {n} samples")));
        }
        let svms = bank
            .svms
            .iter()
            .map(|s| svm_quantize(s, variant, input_spec, device.qubits[s.qubit].if_freq_hz, device.sample_rate_hz, bypass))
            .collect::<Result<_>>()?;
        Ok(Self { svms })
    }

    pub fn discriminate(&self, shot: &RawShot) -> u32 {
        svm_q_discriminate(self, shot)
    }
}

pub fn svm_q_discriminate(bank: &QuantizedSvmBank, shot: &RawShot) -> u32 {
    bank.svms.iter().fold(0, |acc, s| acc | ((s.decide(shot) as u32) << s.qubit))
}

const QMF_MAGIC: &[u8; 4] = b"QMF1";
const QSV_MAGIC: &[u8; 4] = b"QSV1";

/// QMF1: `u32 n_filters`, then per filter `u32 qubit, u32 len,
/// len x (f64 re, f64 im), f64 threshold`.
pub fn write_qmf<W: Write>(w: &mut W, bank: &MatchedFilterBank) -> Result<()> {
    binio::write_magic(w, QMF_MAGIC, 1)?;
    binio::write_len(w, bank.filters.len())?;
    for f in &bank.filters {
        binio::write_len(w, f.qubit)?;
        binio::write_len(w, f.weights.len())?;
        for c in &f.weights {
            binio::write_f64(w, c.re)?;
            binio::write_f64(w, c.im)?;
        }
        binio::write_f64(w, f.threshold)?;
    }
    Ok(())
}

pub fn read_qmf<R: Read>(r: &mut R) -> Result<MatchedFilterBank> {
    binio::read_magic(r, QMF_MAGIC)?;
    let n = binio::read_len(r)?;
    let mut filters = Vec::with_capacity(n);
    for _ in 0..n {
        let qubit = binio::read_len(r)?;
        let len = binio::read_len(r)?;
        let mut weights = Vec::with_capacity(len);
        for _ in 0..len {
            weights.push(Complex64::new(binio::read_f64(r)?, binio::read_f64(r)?));
        }
        filters.push(MatchedFilter { qubit, weights, threshold: binio::read_f64(r)? });
    }
    Ok(MatchedFilterBank { filters })
}

pub(crate) fn write_quant_spec<W: Write>(w: &mut W, s: &QuantSpec) -> Result<()> {
    binio::write_u8(w, s.bits)?;
    binio::write_u8(w, s.signedness.code())?;
    binio::write_f64(w, s.scale)
}

pub(crate) fn read_quant_spec<R: Read>(r: &mut R) -> Result<QuantSpec> {
    let bits = binio::read_u8(r)?;
    let signedness = Signedness::from_code(binio::read_u8(r)?)?;
    QuantSpec::new(bits, signedness, binio::read_f64(r)?)
}

/// QSV1: 8-bit input QuantSpec, `u32 n_svms`, then per SVM `u32 qubit,
/// u32 len, f64[len] weights, f64 bias, f64 lambda`.
pub fn write_qsv<W: Write>(w: &mut W, bank: &SvmBank, input_spec: &QuantSpec) -> Result<()> {
    binio::write_magic(w, QSV_MAGIC, 1)?;
    write_quant_spec(w, input_spec)?;
    binio::write_len(w, bank.svms.len())?;
    for s in &bank.svms {
        binio::write_len(w, s.qubit)?;
        binio::write_len(w, s.weights.len())?;
        binio::write_f64_slice(w, &s.weights)?;
        binio::write_f64(w, s.bias)?;
        binio::write_f64(w, s.lambda)?;
    }
    Ok(())
}

pub fn read_qsv<R: Read>(r: &mut R) -> Result<(SvmBank, QuantSpec)> {
    binio::read_magic(r, QSV_MAGIC)?;
    let spec = read_quant_spec(r)?;
    let n = binio::read_len(r)?;
    let mut svms = Vec::with_capacity(n);
    for _ in 0..n {
        let qubit = binio::read_len(r)?;
        let len = binio::read_len(r)?;
        let weights = binio::read_f64_vec(r, len)?;
        let bias = binio::read_f64(r)?;
        let lambda = binio::read_f64(r)?;
        svms.push(LinearSvm { qubit, weights, bias, lambda, trained: true });
    }
    Ok((SvmBank { svms }, spec))
}
