use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sepcount_bench::{embeddings, mixture};
use sepcount_core::counter::covariance;
use sepcount_core::encoder::encode;
use sepcount_core::numcore::sym_eig;
use sepcount_core::{gde_count_scaled, rank_count, ModelConfig, Separator, DEFAULT_GDE_SCALE};

fn counting(c: &mut Criterion) {
    let v = embeddings(5000, 3);
    let b = covariance(&v).unwrap().b;
    c.bench_function("sym_eig_20", |bn| bn.iter(|| sym_eig(black_box(&b)).unwrap()));
    c.bench_function("gde_count_5000x20", |bn| {
        bn.iter(|| gde_count_scaled(black_box(&v), DEFAULT_GDE_SCALE).unwrap())
    });
    c.bench_function("rank_count_5000x20", |bn| bn.iter(|| rank_count(black_box(&v), 0.1).unwrap()));
}

fn model(c: &mut Criterion) {
    let x = mixture();
    let m = Separator::new(ModelConfig::toy(), 0).unwrap();
    c.bench_function("encode_toy_0.5s", |bn| bn.iter(|| encode(&m.cfg, &m.params, black_box(&x)).unwrap()));
    c.bench_function("forward_toy_0.5s", |bn| bn.iter(|| m.forward(black_box(&x), 2).unwrap()));
}

criterion_group!(benches, counting, model);
criterion_main!(benches);
