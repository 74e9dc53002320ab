use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use qrd_bench::{dataset, matched_filters, qnn, svms, threshold_network, WINDOW};
use qrd_core::synth::boxcar_features;
use qrd_core::{fidelity, generate_shot, DeviceConfig};
use std::hint::black_box;

fn synth(c: &mut Criterion) {
    let dev = DeviceConfig::paper5q(1);
    let mut g = c.benchmark_group("synth");
    g.throughput(Throughput::Elements(1));
    g.bench_function("generate_shot", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            generate_shot(&dev, (seed % 32) as u32, seed).unwrap()
        })
    });
    let ds = dataset(8);
    g.throughput(Throughput::Elements(ds.shots.len() as u64));
    g.bench_function("boxcar_features", |b| b.iter(|| boxcar_features(black_box(&ds.shots), WINDOW).unwrap()));
    g.finish();
}

fn discriminators(c: &mut Criterion) {
    let ds = dataset(8);
    let x = boxcar_features(&ds.shots, WINDOW).unwrap();
    let n = ds.shots.len() as u64;
    let mut g = c.benchmark_group("discriminate");
    g.throughput(Throughput::Elements(n));

    let mf = matched_filters(&ds);
    g.bench_function("matched_filter", |b| b.iter(|| ds.shots.iter().map(|s| mf.discriminate(s)).sum::<u32>()));
    let svm = svms(&ds);
    g.bench_function("svm", |b| b.iter(|| ds.shots.iter().map(|s| svm.discriminate(s)).sum::<u32>()));

    for arch in ["arch5", "arch7"] {
        let model = qnn(arch);
        g.bench_function(format!("qnn_forward_{arch}"), |b| b.iter(|| model.predict(black_box(x.view())).unwrap()));
        let tn = threshold_network(&model);
        let levels: Vec<Vec<i32>> = x.rows().into_iter().map(|r| r.iter().map(|&v| model.input_spec.level(v)).collect()).collect();
        g.bench_function(format!("int_forward_{arch}"), |b| b.iter(|| levels.iter().map(|l| tn.int_forward(l).unwrap()[0]).sum::<f64>()));
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let ds = dataset(300);
    let labels = ds.labels();
    c.bench_function("fidelity_9600_shots", |b| {
        b.iter_batched(|| labels.iter().map(|l| l ^ 1).collect::<Vec<u32>>(), |p| fidelity(&labels, &p, 5).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, synth, discriminators, metrics);
criterion_main!(benches);
