use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use flowaug_bench::{initialized_flow, random};
use flowaug_core::autodiff::Tape;
use flowaug_core::eval::{BaselineCnn, ClassifierConfig};
use flowaug_core::flow::AttentionPlacement;
use flowaug_core::kernels::{conv2d, conv2d_backward};
use flowaug_core::rng::SeededRng;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for (cin, cout) in [(1, 8), (8, 16), (16, 16)] {
        let x = random(&[32, 32, 32, cin], 1);
        let f = random(&[3, 3, cin, cout], 2);
        g.bench_with_input(BenchmarkId::new("forward", format!("{cin}->{cout}")), &(), |b, _| {
            b.iter(|| conv2d(black_box(&x), black_box(&f)).unwrap())
        });
        let gy = random(&[32, 32, 32, cout], 3);
        g.bench_with_input(BenchmarkId::new("backward", format!("{cin}->{cout}")), &(), |b, _| {
            b.iter(|| conv2d_backward(black_box(&x), black_box(&f), black_box(&gy), true, true))
        });
    }
    g.finish();
}

fn flow(c: &mut Criterion) {
    let mut g = c.benchmark_group("flow");
    g.sample_size(20);
    for (name, attention) in [("conv", AttentionPlacement::None), ("attention", AttentionPlacement::LastLevel)] {
        let (model, x) = initialized_flow(32, 16, attention);
        g.bench_function(BenchmarkId::new("log_prob", name), |b| b.iter(|| model.log_prob(black_box(&x)).unwrap()));
        g.bench_function(BenchmarkId::new("nll_gradient", name), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let p = model.store().bind(&mut tape);
                let xv = tape.constant(x.clone());
                let lp = model.log_prob_tape(&mut tape, &p, xv).unwrap();
                let loss = tape.mean_all(lp).unwrap();
                tape.backward(loss).unwrap()
            })
        });
        let z = model.forward(&x).unwrap().0;
        g.bench_function(BenchmarkId::new("inverse", name), |b| b.iter(|| model.inverse(black_box(&z)).unwrap()));
    }
    g.finish();
}

fn classifier(c: &mut Criterion) {
    let cfg = ClassifierConfig::default();
    let cnn = BaselineCnn::new(&cfg, 1, &mut SeededRng::new(0)).unwrap();
    let x = random(&[32, 32, 32, 1], 4);
    c.bench_function("classifier/logits_batch32", |b| b.iter(|| cnn.logits(black_box(&x)).unwrap()));
}

criterion_group!(benches, conv, flow, classifier);
criterion_main!(benches);
