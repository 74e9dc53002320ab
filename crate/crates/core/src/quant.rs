//! Uniform per-tensor quantizers.
//!
//! Signed quantizers are symmetric: with `b` bits the levels are
//! `-(2^(b-1) - 1) ..= 2^(b-1) - 1`, except `b = 1`, which is binary
//! `{-1, +1}`. Unsigned quantizers use `0 ..= 2^b - 1`. Rounding is
//! round-half-to-even everywhere; the integer compiler in `hwsim` relies on
//! the exact same rule.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Signedness {
    SignedSymmetric,
    Unsigned,
}

impl Signedness {
    pub fn code(self) -> u8 {
        match self {
            Signedness::SignedSymmetric => 0,
            Signedness::Unsigned => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Signedness::SignedSymmetric),
            1 => Ok(Signedness::Unsigned),
            c => Err(Error::Format(format!("unknown signedness code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub signedness: Signedness,
    pub scale: f64,
}

impl QuantSpec {
    pub fn new(bits: u8, signedness: Signedness, scale: f64) -> Result<Self> {
        let spec = Self { bits, signedness, scale };
        spec.validate()?;
        Ok(spec)
    }

    pub fn signed(bits: u8, scale: f64) -> Result<Self> {
        Self::new(bits, Signedness::SignedSymmetric, scale)
    }

    pub fn unsigned(bits: u8, scale: f64) -> Result<Self> {
        Self::new(bits, Signedness::Unsigned, scale)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return domain(format!("bit width {} outside 1..=8", self.bits));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return domain(format!("scale {} must be positive and finite", self.scale));
        }
        Ok(())
    }

    pub fn is_binary_signed(&self) -> bool {
        self.bits == 1 && self.signedness == Signedness::SignedSymmetric
    }

    pub fn max_level(&self) -> i32 {
        match self.signedness {
            Signedness::SignedSymmetric if self.bits == 1 => 1,
            Signedness::SignedSymmetric => (1 << (self.bits - 1)) - 1,
            Signedness::Unsigned => (1 << self.bits) - 1,
        }
    }

    pub fn min_level(&self) -> i32 {
        match self.signedness {
            Signedness::SignedSymmetric => -self.max_level(),
            Signedness::Unsigned => 0,
        }
    }

    /// Number of distinct levels.
    pub fn n_levels(&self) -> usize {
        match self.signedness {
            Signedness::SignedSymmetric if self.bits == 1 => 2,
            _ => (self.max_level() - self.min_level() + 1) as usize,
        }
    }

    pub fn contains(&self, level: i32) -> bool {
        if self.is_binary_signed() {
            level == 1 || level == -1
        } else {
            (self.min_level()..=self.max_level()).contains(&level)
        }
    }

    /// Largest representable magnitude, `max_level * scale`.
    pub fn range_max(&self) -> f64 {
        self.max_level() as f64 * self.scale
    }

    /// Level of a single finite value.
    #[inline]
    pub fn level(&self, x: f64) -> i32 {
        if self.is_binary_signed() {
            return if x < 0.0 { -1 } else { 1 };
        }
        let r = (x / self.scale).round_ties_even();
        let r = r.clamp(self.min_level() as f64, self.max_level() as f64);
        r as i32
    }

    #[inline]
    pub fn dequantize(&self, level: i32) -> f64 {
        level as f64 * self.scale
    }

    #[inline]
    pub fn fake(&self, x: f64) -> f64 {
        self.dequantize(self.level(x))
    }

    /// Whether the straight-through estimator passes a gradient at `x`.
    #[inline]
    pub fn ste_passes(&self, x: f64) -> bool {
        let hi = self.range_max();
        match self.signedness {
            Signedness::SignedSymmetric => x.abs() <= hi,
            Signedness::Unsigned => (0.0..=hi).contains(&x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub levels: Vec<i32>,
    pub spec: QuantSpec,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Vec<f64> {
        self.levels.iter().map(|&l| self.spec.dequantize(l)).collect()
    }
}

/// Result of [`calibrate_scale`]. `degenerate` is set when every sample
/// was zero and the scale fell back to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub spec: QuantSpec,
    pub degenerate: bool,
}

/// Nearest-rank percentile of `|samples|`; `percentile = 100` is the max.
pub fn abs_percentile(samples: &[f64], percentile: f64) -> Result<f64> {
    if samples.is_empty() {
        return domain("cannot calibrate on an empty sample set");
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return domain(format!("percentile {percentile} outside (0, 100]"));
    }
    if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut abs: Vec<f64> = samples.iter().map(|x| x.abs()).collect();
    // Absorb representation error in the percentile (99.9 is not exact).
    let exact = percentile * abs.len() as f64 / 100.0;
    let rank = (exact - exact * 1e-12).ceil() as usize;
    let k = rank.clamp(1, abs.len()) - 1;
    let (_, v, _) = abs.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    Ok(*v)
}

/// Scale so that the `percentile`-th absolute sample maps to the largest
/// positive level.
pub fn calibrate_scale(samples: &[f64], bits: u8, signedness: Signedness, percentile: f64) -> Result<Calibration> {
    let probe = QuantSpec::new(bits, signedness, 1.0)?;
    let p = abs_percentile(samples, percentile)?;
    if p == 0.0 {
        log::warn!("calibration samples are all zero; using scale 1");
        return Ok(Calibration { spec: probe, degenerate: true });
    }
    let spec = QuantSpec::new(bits, signedness, p / probe.max_level() as f64)?;
    Ok(Calibration { spec, degenerate: false })
}

fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

pub fn quantize(x: &[f64], spec: &QuantSpec) -> Result<QuantizedTensor> {
    spec.validate()?;
    check_finite(x)?;
    Ok(QuantizedTensor { levels: x.iter().map(|&v| spec.level(v)).collect(), spec: *spec, shape: vec![x.len()] })
}

/// `dequantize(quantize(x))`.
pub fn fake_quantize(x: &[f64], spec: &QuantSpec) -> Result<Vec<f64>> {
    Ok(quantize(x, spec)?.dequantize())
}

/// Straight-through gradient: `upstream` where `x` is inside the
/// representable range (boundaries included), zero where it is clipped.
pub fn ste_backward(x: &[f64], upstream: &[f64], spec: &QuantSpec) -> Result<Vec<f64>> {
    if x.len() != upstream.len() {
        return Err(Error::Shape { expected: x.len(), got: upstream.len() });
    }
    Ok(x.iter().zip(upstream).map(|(&v, &g)| if spec.ste_passes(v) { g } else { 0.0 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s2() -> QuantSpec {
        QuantSpec::signed(2, 0.5).unwrap()
    }

    #[test]
    fn level_sets() {
        let s = QuantSpec::signed(4, 1.0).unwrap();
        assert_eq!((s.min_level(), s.max_level(), s.n_levels()), (-7, 7, 15));
        let u = QuantSpec::unsigned(4, 1.0).unwrap();
        assert_eq!((u.min_level(), u.max_level(), u.n_levels()), (0, 15, 16));
        let b = QuantSpec::signed(1, 1.0).unwrap();
        assert!(b.contains(1) && b.contains(-1) && !b.contains(0));
        assert_eq!(b.n_levels(), 2);
        let ub = QuantSpec::unsigned(1, 1.0).unwrap();
        assert_eq!((ub.min_level(), ub.max_level()), (0, 1));
        assert!(QuantSpec::signed(0, 1.0).is_err());
        assert!(QuantSpec::signed(9, 1.0).is_err());
        assert!(QuantSpec::signed(4, 0.0).is_err());
        assert!(QuantSpec::signed(4, f64::INFINITY).is_err());
    }

    #[test]
    fn calibration_examples() {
        let c = calibrate_scale(&[-1.0, 1.0], 2, Signedness::SignedSymmetric, 100.0).unwrap();
        assert_eq!(c.spec.scale, 1.0);
        let xs: Vec<f64> = (0..16).map(f64::from).collect();
        let c = calibrate_scale(&xs, 4, Signedness::Unsigned, 100.0).unwrap();
        assert_eq!(c.spec.scale, 1.0);
        let c = calibrate_scale(&[0.0, 0.0], 4, Signedness::SignedSymmetric, 99.9).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.spec.scale, 1.0);
        assert!(calibrate_scale(&[], 4, Signedness::Unsigned, 50.0).is_err());
        assert!(calibrate_scale(&[1.0], 4, Signedness::Unsigned, 0.0).is_err());
        assert!(calibrate_scale(&[1.0], 4, Signedness::Unsigned, 100.5).is_err());
    }

    #[test]
    fn gaussian_percentile_calibration() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        use statrs::distribution::{ContinuousCDF, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = calibrate_scale(&xs, 4, Signedness::SignedSymmetric, 99.9).unwrap();
        // 99.9th percentile of |x| is the 0.9995 quantile of x.
        let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.9995);
        let want = z / 7.0;
        assert!((c.spec.scale - want).abs() / want < 0.05, "{} vs {want}", c.spec.scale);
        // The empirical oracle: sorted nearest rank.
        let mut abs: Vec<f64> = xs.iter().map(|x| x.abs()).collect();
        abs.sort_by(f64::total_cmp);
        assert_eq!(c.spec.scale, abs[99_899] / 7.0);
    }

    #[test]
    fn quantize_examples() {
        let q = quantize(&[0.0, 0.6, 10.0, -10.0], &s2()).unwrap();
        assert_eq!(q.levels, vec![0, 1, 1, -1]);
        assert_eq!(q.dequantize(), vec![0.0, 0.5, 0.5, -0.5]);
        assert!(quantize(&[f64::NAN], &s2()).is_err());
        assert_eq!(quantize(&[0.0], &QuantSpec::signed(8, 0.1).unwrap()).unwrap().levels, vec![0]);
        // Ties go to even.
        let s = QuantSpec::signed(4, 1.0).unwrap();
        assert_eq!(quantize(&[0.5, 1.5, 2.5, -0.5, -1.5], &s).unwrap().levels, vec![0, 2, 2, 0, -2]);
        // Binary: sign with sign(0) = +1.
        let b = QuantSpec::signed(1, 0.3).unwrap();
        assert_eq!(quantize(&[0.0, -0.1, 4.0], &b).unwrap().levels, vec![1, -1, 1]);
    }

    #[test]
    fn fake_quantize_examples() {
        assert_eq!(fake_quantize(&[0.6], &s2()).unwrap(), vec![0.5]);
        assert_eq!(fake_quantize(&[-0.6], &s2()).unwrap(), vec![-0.5]);
        assert_eq!(fake_quantize(&[0.5, -0.5, 0.0], &s2()).unwrap(), vec![0.5, -0.5, 0.0]);
    }

    #[test]
    fn ste_examples() {
        let g = [1.0, 2.0, 3.0, 4.0, 5.0];
        let x = [0.1, -0.4, 0.5, 10.0, -0.51];
        let out = ste_backward(&x, &g, &s2()).unwrap();
        // Mask oracle by direct enumeration of the definition.
        let want: Vec<f64> = x.iter().zip(g).map(|(&v, g)| if v.abs() <= 0.5 { g } else { 0.0 }).collect();
        assert_eq!(out, want);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 0.0, 0.0]);
        let u = QuantSpec::unsigned(2, 1.0).unwrap();
        assert_eq!(ste_backward(&[-0.1, 0.0, 2.9, 3.0, 3.1], &[1.0; 5], &u).unwrap(), vec![0.0, 1.0, 1.0, 1.0, 0.0]);
        assert!(ste_backward(&[1.0], &[1.0, 2.0], &s2()).is_err());
    }

    fn any_spec() -> impl Strategy<Value = QuantSpec> {
        (1u8..=8, prop::bool::ANY, 1e-3f64..10.0).prop_map(|(bits, signed, scale)| {
            let s = if signed { Signedness::SignedSymmetric } else { Signedness::Unsigned };
            QuantSpec::new(bits, s, scale).unwrap()
        })
    }

    proptest! {
        #[test]
        fn roundtrip_error_bounded_in_range(spec in any_spec(), t in 0.0f64..1.0) {
            prop_assume!(!spec.is_binary_signed());
            let lo = spec.min_level() as f64 * spec.scale;
            let x = lo + t * (spec.range_max() - lo);
            let fq = spec.fake(x);
            prop_assert!((x - fq).abs() <= spec.scale / 2.0 * (1.0 + 1e-12));
        }

        #[test]
        fn saturates_to_endpoints(spec in any_spec(), over in 1.0f64..100.0) {
            let hi = spec.range_max() + over * spec.scale;
            prop_assert_eq!(spec.fake(hi), spec.range_max());
            let lo = -hi;
            prop_assert_eq!(spec.fake(lo), spec.min_level() as f64 * spec.scale);
        }

        #[test]
        fn monotone_and_closed(spec in any_spec(), mut xs in prop::collection::vec(-50.0f64..50.0, 1..64)) {
            xs.sort_by(f64::total_cmp);
            let q = quantize(&xs, &spec).unwrap();
            prop_assert!(q.levels.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(q.levels.iter().all(|&l| spec.contains(l)));
        }

        #[test]
        fn fake_quantize_idempotent(spec in any_spec(), xs in prop::collection::vec(-50.0f64..50.0, 1..32)) {
            let once = fake_quantize(&xs, &spec).unwrap();
            prop_assert_eq!(fake_quantize(&once, &spec).unwrap(), once);
        }

        #[test]
        fn binary_outputs_two_values(scale in 1e-3f64..10.0, xs in prop::collection::vec(-5.0f64..5.0, 1..32)) {
            let spec = QuantSpec::signed(1, scale).unwrap();
            for v in fake_quantize(&xs, &spec).unwrap() {
                prop_assert!(v == scale || v == -scale);
            }
        }
    }
}
