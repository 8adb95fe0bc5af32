use criterion::{criterion_group, criterion_main, Criterion};
use goat_core::supervision::LossConfig;
use goat_core::train::sample_gradients;

fn forward(c: &mut Criterion) {
    let model = goat_bench::model();
    let s = goat_bench::scene(0);
    c.bench_function("predict_64x128_t4", |bench| bench.iter(|| model.predict(&s.left, &s.right).unwrap()));
}

fn gradients(c: &mut Criterion) {
    let model = goat_bench::model();
    let s = goat_bench::scene(0);
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("loss_and_gradients_64x128_t4", |bench| {
        bench.iter(|| sample_gradients(&model, &s, &LossConfig::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, forward, gradients);
criterion_main!(benches);
