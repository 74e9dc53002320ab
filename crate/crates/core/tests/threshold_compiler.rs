use ndarray::Array2;
use proptest::prelude::*;
use qrd_core::hwsim::{check_equivalence, compile_thresholds, estimate_latency, FoldingConfig, LayerOp};
use qrd_core::qnn::{build_model, ArchSpec, QnnModel};
use qrd_core::quant::QuantSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Randomizes biases and batch-norm statistics so thresholds land inside
/// the accumulator range. A fraction of gains is negative.
fn randomize(m: &mut QnnModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut m.layers {
        for blk in &mut layer.blocks {
            blk.bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            if let Some(bn) = &mut blk.bn {
                bn.gamma.mapv_inplace(|_| rng.random_range(-1.5..2.0));
                bn.beta.mapv_inplace(|_| rng.random_range(-0.5..1.0));
                bn.running_mean.mapv_inplace(|_| rng.random_range(-0.5..0.5));
                bn.running_var.mapv_inplace(|_| rng.random_range(0.05..2.0));
            }
        }
    }
}

/// Every combination of input levels for `n` inputs.
fn grid(spec: &QuantSpec, n: usize) -> Array2<f64> {
    let levels: Vec<i32> = (spec.min_level()..=spec.max_level()).filter(|l| spec.contains(*l)).collect();
    let total = levels.len().pow(n as u32);
    Array2::from_shape_fn((total, n), |(row, col)| {
        let digit = (row / levels.len().pow(col as u32)) % levels.len();
        spec.dequantize(levels[digit])
    })
}

fn one_neuron_exhaustive(input_bits: u8, n_inputs: usize, weight_bits: u8, act_bits: u8, seed: u64) {
    let arch = ArchSpec::dense(vec![n_inputs, 1, 1], (input_bits, weight_bits, act_bits));
    let mut m = build_model(&arch, seed).unwrap();
    m.input_spec = QuantSpec::new(input_bits, arch.input_signedness, 0.1).unwrap();
    randomize(&mut m, seed);
    let tn = compile_thresholds(&m).unwrap();
    let x = grid(&m.input_spec, n_inputs);
    let r = check_equivalence(&m, &tn, x.view()).unwrap();
    assert_eq!(r.mismatches, 0, "{input_bits}-bit x {n_inputs}: first mismatch {:?}", r.first_mismatch);
    assert_eq!(r.n_checked, x.nrows());
}

#[test]
fn exhaustive_one_neuron_grids() {
    for seed in 0..4 {
        one_neuron_exhaustive(4, 5, 4, 4, seed);
        one_neuron_exhaustive(3, 6, 3, 2, seed);
        one_neuron_exhaustive(2, 8, 2, 2, seed);
        one_neuron_exhaustive(1, 8, 1, 1, seed);
    }
}

#[test]
fn identity_batch_norm_thresholds_sit_at_half_levels() {
    // One input, weight level 1: A is the input level. Unit scales make
    // g(A) = round(relu(A)) clamped to 0..=3.
    let arch = ArchSpec::dense(vec![1, 1, 1], (8, 2, 2));
    let mut m = build_model(&arch, 0).unwrap();
    m.input_spec = QuantSpec::signed(8, 1.0).unwrap();
    m.layers[0].blocks[0].weight.fill(1.0);
    let bn = m.layers[0].blocks[0].bn.as_mut().unwrap();
    bn.running_var.fill(1.0 - bn.eps);
    let q = m.weight_spec(0);
    assert_eq!(q.level(1.0), 1);
    let act = m.act_spec(0).unwrap();
    // Activation levels are multiples of 2/3; rescaling the input makes the
    // pre-activation equal to A * (2/3) / (input step).
    m.input_spec = QuantSpec::signed(8, act.scale / q.scale).unwrap();
    let tn = compile_thresholds(&m).unwrap();
    let LayerOp::Threshold { thresholds } = &tn.layers[0].op else { panic!("hidden layer") };
    // Level k needs A >= k - 0.5; ties at .5 round to even, and A is an
    // integer, so the thresholds are exactly 1, 2, 3.
    assert_eq!(thresholds[0], vec![1, 2, 3]);
    // Enumeration oracle over A in [-10, 10].
    for a in -10i32..=10 {
        let (hidden, _) = tn.trace(&[a]).unwrap();
        let want = (a.max(0) as f64).round_ties_even().min(3.0) as i32;
        assert_eq!(hidden[0][0], want, "A = {a}");
    }
}

#[test]
fn saturated_neuron_collapses_thresholds() {
    let arch = ArchSpec::dense(vec![4, 1, 1], (4, 2, 2));
    let mut m = build_model(&arch, 0).unwrap();
    m.input_spec = QuantSpec::signed(4, 0.1).unwrap();
    m.layers[0].blocks[0].weight.fill(-0.3);
    m.layers[0].blocks[0].bn.as_mut().unwrap().beta.fill(50.0);
    let tn = compile_thresholds(&m).unwrap();
    let LayerOp::Threshold { thresholds } = &tn.layers[0].op else { panic!("hidden layer") };
    assert!(thresholds[0].iter().all(|&t| t == i64::MIN));
    let r = check_equivalence(&m, &tn, grid(&m.input_spec, 4).view()).unwrap();
    assert!(r.passed());
}

#[test]
fn zero_input_zero_bias_gives_zero_logits() {
    let m = build_model(&ArchSpec::preset("arch5", 5).unwrap(), 0).unwrap();
    let tn = compile_thresholds(&m).unwrap();
    assert_eq!(tn.int_forward(&vec![0; 512]).unwrap(), vec![0.0; 5]);
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = build_model(&ArchSpec::dense(vec![3, 2, 1], (2, 2, 2)), 0).unwrap();
    let tn = compile_thresholds(&m).unwrap();
    assert!(tn.int_forward(&[0, 0]).is_err());
    assert!(tn.int_forward(&[0, 5, 0]).is_err());
    let mut bad = m.clone();
    bad.layers[0].blocks[0].bn.as_mut().unwrap().running_var[0] = -1.0;
    assert!(compile_thresholds(&bad).is_err());
    let mut bypass = m;
    bypass.quant_bypass = true;
    assert!(compile_thresholds(&bypass).is_err());
}

fn random_features(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.5..1.5))
}

#[test]
fn random_full_models_match_on_ten_thousand_inputs() {
    for (i, name) in ["arch5", "arch6", "arch7", "arch8", "arch9", "arch4"].into_iter().enumerate() {
        let mut m = build_model(&ArchSpec::preset(name, 5).unwrap(), i as u64).unwrap();
        m.input_spec = QuantSpec::signed(4, 0.15).unwrap();
        randomize(&mut m, 100 + i as u64);
        let tn = compile_thresholds(&m).unwrap();
        let x = random_features(10_000, m.n_inputs(), i as u64);
        let r = check_equivalence(&m, &tn, x.view()).unwrap();
        assert_eq!(r.mismatches, 0, "{name}: first mismatch {:?}", r.first_mismatch);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn thresholds_are_sorted_and_levels_monotone(seed in 0u64..10_000, act_bits in 1u8..=4) {
        let arch = ArchSpec::dense(vec![6, 4, 2], (4, 3, act_bits));
        let mut m = build_model(&arch, seed).unwrap();
        m.input_spec = QuantSpec::signed(4, 0.2).unwrap();
        randomize(&mut m, seed);
        let tn = compile_thresholds(&m).unwrap();
        let LayerOp::Threshold { thresholds } = &tn.layers[0].op else { panic!("hidden layer") };
        for t in thresholds {
            prop_assert_eq!(t.len(), (1usize << act_bits) - 1);
            prop_assert!(t.windows(2).all(|p| p[0] <= p[1]));
            let level = |a: i64| t.iter().filter(|&&th| th <= a).count();
            prop_assert!((-60i64..60).all(|a| level(a) <= level(a + 1)));
        }
    }

    #[test]
    fn latency_monotone_in_folding(layer in 0usize..2, pe in 1usize..=64, simd in 1usize..=512) {
        let a = ArchSpec::preset("arch4", 5).unwrap();
        let base = FoldingConfig::fully_parallel(&a).unwrap();
        let mut f = base.clone();
        let maxes = [(64, 512), (32, 64)];
        f.layers[layer].pe = pe.min(maxes[layer].0);
        f.layers[layer].simd = simd.min(maxes[layer].1);
        let mut g = f.clone();
        g.layers[layer].pe = (f.layers[layer].pe / 2).max(1);
        let mut h = f.clone();
        h.layers[layer].simd = (f.layers[layer].simd / 2).max(1);
        let cf = estimate_latency(&a, &f).unwrap().layers[layer].cycles;
        prop_assert!(estimate_latency(&a, &g).unwrap().layers[layer].cycles >= cf);
        prop_assert!(estimate_latency(&a, &h).unwrap().layers[layer].cycles >= cf);
    }
}

#[test]
fn segmented_never_slower_than_capped_dense() {
    let dense = ArchSpec::preset("arch5", 5).unwrap();
    let seg = ArchSpec::preset("arch7", 5).unwrap();
    let s = estimate_latency(&seg, &FoldingConfig::fully_parallel(&seg).unwrap()).unwrap().total_cycles;
    for cap in 1..64 {
        let f = FoldingConfig::fully_parallel(&dense).unwrap().with_pe_cap(0, cap);
        assert!(s <= estimate_latency(&dense, &f).unwrap().total_cycles, "cap {cap}");
    }
}

#[test]
fn overlap_total_ignores_middle_depth() {
    let short = ArchSpec::piecewise(vec![256, 128, 128, 128, 128, 5], 64, (4, 2, 4));
    let deep = ArchSpec::piecewise(vec![256, 128, 128, 128, 128, 128, 5], 64, (4, 2, 4));
    let cycles = |a: &ArchSpec, overlap: bool| {
        let mut f = FoldingConfig::fully_parallel(a).unwrap();
        f.streaming_overlap = overlap;
        estimate_latency(a, &f).unwrap().total_cycles
    };
    assert_eq!(cycles(&short, true), cycles(&deep, true));
    let per_layer = |a: &ArchSpec| {
        let f = FoldingConfig::fully_parallel(a).unwrap();
        estimate_latency(a, &f).unwrap().layers.iter().map(|l| l.cycles).sum::<u64>()
    };
    assert_eq!(cycles(&short, false), per_layer(&short));
    assert!(cycles(&deep, false) > cycles(&short, false));
}
