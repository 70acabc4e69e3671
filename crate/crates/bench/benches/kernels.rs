use criterion::{black_box, criterion_group, criterion_main, Criterion};
use obsnet_bench::test_batch;
use obsnet_core::laa::{attack_batch, AttackConfig};
use obsnet_core::metrics::{aupr, auroc, fpr_at_95_tpr};
use obsnet_core::ndgrad::kernels::conv3x3_forward;
use obsnet_core::segmenter::SegNet;
use obsnet_core::{Array4, Mode, SeededRng};

fn conv(c: &mut Criterion) {
    let mut rng = SeededRng::new(1);
    let x = Array4::from_vec([8, 16, 64, 64], (0..8 * 16 * 4096).map(|_| rng.next_f32()).collect());
    let w: Vec<f32> = (0..16 * 16 * 9).map(|_| rng.next_f32() - 0.5).collect();
    let b = vec![0.0f32; 16];
    c.bench_function("conv3x3 8x16x64x64 -> 16", |bench| {
        bench.iter(|| conv3x3_forward(black_box(&x), &w, &b, 16))
    });
}

fn segmenter(c: &mut Criterion) {
    let net = SegNet::new();
    let params = net.init_params(&mut SeededRng::new(0));
    let (_, x) = test_batch(8);
    c.bench_function("segmenter eval forward, batch 8", |bench| {
        bench.iter(|| net.forward(&params, black_box(&x), Mode::Eval, &mut SeededRng::new(0)).unwrap())
    });
    let cfg = AttackConfig::default();
    c.bench_function("local attack, batch 8", |bench| {
        bench.iter(|| attack_batch(&net, &params, black_box(&x), None, &cfg, &mut SeededRng::new(3)).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = SeededRng::new(2);
    let n = 200 * 4096;
    let s: Vec<f32> = (0..n).map(|_| rng.next_f32()).collect();
    let y: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.05)).collect();
    let mut g = c.benchmark_group("metrics over 200 images");
    g.sample_size(10);
    g.bench_function("auroc", |bench| bench.iter(|| auroc(black_box(&s), &y).unwrap()));
    g.bench_function("aupr", |bench| bench.iter(|| aupr(black_box(&s), &y).unwrap()));
    g.bench_function("fpr95tpr", |bench| bench.iter(|| fpr_at_95_tpr(black_box(&s), &y).unwrap()));
    g.finish();
}

criterion_group!(benches, conv, segmenter, metrics);
criterion_main!(benches);
