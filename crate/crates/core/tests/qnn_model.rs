use ndarray::{concatenate, s, Array1, Array2, Axis};
use qrd_core::qnn::{build_model, loss, predict_states, train, train_features, ArchSpec, Mode, QnnModel, TrainConfig};
use qrd_core::quant::{ste_backward, QuantSpec};
use qrd_core::{fidelity, generate_dataset, DeviceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randomize(m: &mut QnnModel, rng: &mut ChaCha8Rng) {
    for t in m.param_tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    for layer in &mut m.layers {
        for blk in &mut layer.blocks {
            if let Some(bn) = &mut blk.bn {
                bn.running_mean.mapv_inplace(|_| rng.random_range(-0.5..0.5));
                bn.running_var.mapv_inplace(|_| rng.random_range(0.1..2.0));
            }
        }
    }
}

/// Dense model whose first layer stacks the segment blocks.
fn stacked(seg: &QnnModel) -> QnnModel {
    let mut arch = seg.arch.clone();
    arch.kind = qrd_core::qnn::ArchKind::Dense;
    arch.n_segments = 0;
    let mut dense = build_model(&arch, 0).unwrap();
    dense.input_spec = seg.input_spec;
    let blocks = &seg.layers[0].blocks;
    let cat1 = |f: &dyn Fn(usize) -> Array1<f64>| -> Array1<f64> {
        let parts: Vec<Array1<f64>> = (0..blocks.len()).map(f).collect();
        concatenate(Axis(0), &parts.iter().map(|p| p.view()).collect::<Vec<_>>()).unwrap()
    };
    let d = &mut dense.layers[0].blocks[0];
    d.weight = concatenate(Axis(0), &blocks.iter().map(|b| b.weight.view()).collect::<Vec<_>>()).unwrap();
    d.bias = cat1(&|i| blocks[i].bias.clone());
    let bn = d.bn.as_mut().unwrap();
    bn.gamma = cat1(&|i| blocks[i].bn.as_ref().unwrap().gamma.clone());
    bn.beta = cat1(&|i| blocks[i].bn.as_ref().unwrap().beta.clone());
    bn.running_mean = cat1(&|i| blocks[i].bn.as_ref().unwrap().running_mean.clone());
    bn.running_var = cat1(&|i| blocks[i].bn.as_ref().unwrap().running_var.clone());
    dense.layers[1] = seg.layers[1].clone();
    dense
}

#[test]
fn segmented_equals_stacked_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let arch = ArchSpec::preset("arch7", 5).unwrap();
    for trial in 0..10 {
        let mut seg = build_model(&arch, trial).unwrap();
        randomize(&mut seg, &mut rng);
        seg.input_spec = QuantSpec::signed(4, 0.2).unwrap();
        let dense = stacked(&seg);
        let x = Array2::from_shape_simple_fn((64, 512), || rng.random_range(-1.5..1.5));
        let a = seg.logits(x.view()).unwrap();
        let b = dense.logits(x.view()).unwrap();
        let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        assert!(diff <= 1e-10, "trial {trial}: {diff}");
        // Train-mode forward matches too when dropout is off.
        let mut seg0 = seg.clone();
        seg0.arch.dropout_p = 0.0;
        let mut dense0 = dense.clone();
        dense0.arch.dropout_p = 0.0;
        let ta = seg0.forward_batch(x.view(), Mode::Train, 0).unwrap();
        let tb = dense0.forward_batch(x.view(), Mode::Train, 0).unwrap();
        assert!((&ta - &tb).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v)) <= 1e-10);
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn gradients_match_central_differences() {
    let mut arch = ArchSpec::dense(vec![16, 8, 3], (4, 2, 2));
    arch.dropout_p = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for point in 0..5 {
        let mut m = build_model(&arch, point).unwrap();
        m.quant_bypass = true;
        randomize(&mut m, &mut rng);
        let x = Array2::from_shape_simple_fn((12, 16), || rng.random_range(-2.0..2.0));
        let labels: Vec<u32> = (0..12).map(|_| rng.random_range(0..8)).collect();
        let (_, g) = m.loss_and_grads(x.view(), &labels, 0).unwrap();
        let h = 1e-5;
        for (ti, t) in m.param_tensors().iter().enumerate() {
            for i in 0..t.len() {
                let at = |d: f64| {
                    let mut p = m.clone();
                    p.param_tensors_mut()[ti][i] += d;
                    p.batch_loss(x.view(), &labels, 0).unwrap()
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                worst = worst.max(rel_err(g.tensors[ti][i], fd));
            }
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn output_layer_gradient_is_ste_composition() {
    // One linear layer: dL/dW = ste_backward(W, dL/dWq).
    for bits in [1u8, 2, 3, 4] {
        let arch = ArchSpec::dense(vec![10, 3], (4, bits, 2));
        let mut m = build_model(&arch, bits as u64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(bits as u64);
        m.layers[0].blocks[0].weight.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        m.input_spec = QuantSpec::signed(4, 0.25).unwrap();
        let x = Array2::from_shape_simple_fn((9, 10), || rng.random_range(-2.0..2.0));
        let labels: Vec<u32> = (0..9).map(|_| rng.random_range(0..8)).collect();
        let (_, g) = m.loss_and_grads(x.view(), &labels, 0).unwrap();

        let ws = m.weight_spec(0);
        let w = &m.layers[0].blocks[0].weight;
        let wq = w.mapv(|v| ws.fake(v));
        let xq = x.mapv(|v| m.input_spec.fake(v));
        let z = xq.dot(&wq.t()) + &m.layers[0].blocks[0].bias;
        let dz = Array2::from_shape_fn(z.raw_dim(), |(i, q)| {
            let s = 1.0 / (1.0 + (-z[[i, q]]).exp());
            (s - ((labels[i] >> q) & 1) as f64) / (9.0 * 3.0)
        });
        let dwq = dz.t().dot(&xq);
        let mut want = ste_backward(w.as_slice().unwrap(), dwq.as_slice().unwrap(), &ws).unwrap();
        if bits > 2 {
            // Max-abs scaling never clips; the mask is all-pass.
            want = dwq.as_slice().unwrap().to_vec();
        }
        for (a, b) in g.tensors[0].iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{bits} bits: {a} vs {b}");
        }
    }
}

#[test]
fn piecewise_forward_matches_manual_chain() {
    let mut arch = ArchSpec::piecewise(vec![8, 6, 6, 2], 3, (4, 2, 4));
    arch.dropout_p = 0.0;
    let mut m = build_model(&arch, 3).unwrap();
    m.quant_bypass = true;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    randomize(&mut m, &mut rng);
    assert_eq!(m.n_inputs(), 8 + 2 * 3);
    let x = Array2::from_shape_simple_fn((5, 14), || rng.random_range(-1.0..1.0));
    let got = m.logits(x.view()).unwrap();
    for r in 0..5 {
        let row = x.row(r);
        let mut prev: Vec<f64> = Vec::new();
        let mut offset = 0;
        for (k, layer) in m.layers.iter().enumerate() {
            let fresh_len = if k == 0 { 8 } else { 3 };
            let mut u = prev.clone();
            u.extend(row.slice(s![offset..offset + fresh_len]).iter());
            offset += fresh_len;
            let blk = &layer.blocks[0];
            let mut out = Vec::new();
            for j in 0..blk.bias.len() {
                let z: f64 = blk.weight.row(j).iter().zip(&u).map(|(w, v)| w * v).sum::<f64>() + blk.bias[j];
                out.push(match &blk.bn {
                    Some(bn) => {
                        let y = bn.gamma[j] * (z - bn.running_mean[j]) / (bn.running_var[j] + bn.eps).sqrt() + bn.beta[j];
                        y.max(0.0)
                    }
                    None => z,
                });
            }
            prev = out;
        }
        for (a, b) in got.row(r).iter().zip(&prev) {
            assert!((a - b).abs() < 1e-12, "row {r}: {a} vs {b}");
        }
    }
}

#[test]
fn predict_states_is_joint_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
        let logp = |state: u32| -> f64 {
            z.iter()
                .enumerate()
                .map(|(q, &zq)| {
                    let p1 = 1.0 / (1.0 + (-zq).exp());
                    if (state >> q) & 1 == 1 {
                        p1.ln()
                    } else {
                        (1.0 - p1).ln()
                    }
                })
                .sum()
        };
        let best = (0..32u32).max_by(|&a, &b| logp(a).total_cmp(&logp(b))).unwrap();
        assert_eq!(predict_states(&z), best);
    }
}

#[test]
fn loss_of_two_heads_is_softplus_average() {
    let sp = |x: f64| (1.0 + x.exp()).ln();
    assert!((loss(&[1.0, -1.0], 0b01) - 0.5 * (sp(-1.0) + sp(-1.0))).abs() < 1e-15);
    assert!((loss(&[2.0, 3.0], 0b10) - 0.5 * (sp(2.0) + sp(-3.0))).abs() < 1e-15);
}

#[test]
fn minimal_arch_learns_noiseless_data() {
    let dev = DeviceConfig::independent(&[30e6, 90e6], 32, 0.0, 4);
    let ds = generate_dataset(&dev, 64).unwrap();
    let arch = ArchSpec::dense(vec![32, 2], (8, 8, 8));
    let cfg = TrainConfig { epochs: 30, batch_size: 32, lr0: 1e-2, val_split: 0.0, ..Default::default() };
    let out = train(build_model(&arch, 0).unwrap(), &ds, 2, &cfg).unwrap();
    let preds = out.model.predict_dataset(&ds).unwrap();
    let r = fidelity(&ds.labels(), &preds, 2).unwrap();
    assert!(r.f_gm > 0.9, "F_GM {}", r.f_gm);
    let h = &out.history.epochs;
    assert!(h.last().unwrap().loss < h[0].loss);
}

#[test]
fn eval_logits_do_not_depend_on_batch_composition() {
    let dev = DeviceConfig::independent(&[30e6, 90e6], 64, 0.5, 5);
    let ds = generate_dataset(&dev, 50).unwrap();
    let cfg = TrainConfig { epochs: 3, batch_size: 32, ..Default::default() };
    let arch = ArchSpec::dense(vec![64, 16, 2], (4, 2, 2));
    let out = train(build_model(&arch, 1).unwrap(), &ds, 2, &cfg).unwrap();
    let x = qrd_core::synth::boxcar_features(&ds.shots, 2).unwrap();
    let all = out.model.logits(x.view()).unwrap();
    for i in [0usize, 17, 198] {
        let alone = out.model.forward(x.row(i).as_slice().unwrap()).unwrap();
        assert_eq!(alone, all.row(i).to_vec());
        let pair = out.model.logits(x.slice(s![i..i + 2, ..])).unwrap();
        assert_eq!(pair.row(0), all.row(i));
    }
}

#[test]
fn same_seed_gives_identical_weights_different_seed_does_not() {
    let dev = DeviceConfig::independent(&[30e6], 32, 0.5, 6);
    let ds = generate_dataset(&dev, 40).unwrap();
    let arch = ArchSpec::dense(vec![32, 8, 1], (4, 2, 2));
    let run = |seed| {
        let cfg = TrainConfig { epochs: 2, batch_size: 16, seed, ..Default::default() };
        train(build_model(&arch, 0).unwrap(), &ds, 2, &cfg).unwrap().model
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn feature_width_mismatch_fails_before_training() {
    let x = Array2::<f64>::zeros((10, 7));
    let labels = vec![0u32; 10];
    let m = build_model(&ArchSpec::dense(vec![8, 4, 1], (4, 2, 2)), 0).unwrap();
    assert!(train_features(m, x.view(), &labels, &TrainConfig::default()).is_err());
    assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { val_split: 1.0, ..Default::default() }.validate().is_err());
}
