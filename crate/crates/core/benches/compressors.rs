//! Run once with default features and once with `--no-default-features`
//! to compare the rayon core against the sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use powersgd::compressors::ParamKey;
use powersgd::rng::{self, label};
use powersgd::train::{run, RunConfig};
use powersgd::verify::{monte_carlo_fixture, monte_carlo_moments};
use powersgd::{Communicator, Compressor, CompressorConfig, CompressorKind, Matrix};

fn label_mode() -> &'static str {
    if powersgd::par::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn exchange(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("exchange/{}", label_mode()));
    let mut s = rng::stream(1, &[label::FIXTURE]);
    let locals: Vec<Matrix> = (0..8).map(|_| Matrix::random_normal(256, 576, 1.0, &mut s)).collect();
    for kind in [CompressorKind::PowerSgd, CompressorKind::TopK, CompressorKind::SignNorm] {
        group.bench_with_input(BenchmarkId::from_parameter(kind), &kind, |b, &kind| {
            let mut comp = Compressor::new(CompressorConfig::new(kind, 2, 3)).unwrap();
            let mut comm = Communicator::new(locals.len()).unwrap();
            let mut step = 0;
            b.iter(|| {
                step += 1;
                black_box(comp.exchange(ParamKey { index: 0, step }, &locals, &mut comm).unwrap());
            });
        });
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let target = monte_carlo_fixture();
    c.bench_function(&format!("monte_carlo_sketch/{}", label_mode()), |b| {
        b.iter(|| {
            monte_carlo_moments(2_000, |i| {
                let basis = powersgd::compressors::sketch_basis(5, 0, i as u64, target.cols(), 2);
                powersgd::compressors::unbiased_rank_r_compress(&target, &basis)
                    .unwrap()
                    .decompress()
            })
        })
    });
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("train_20_steps/{}", label_mode()));
    group.sample_size(10);
    for workers in [1usize, 4, 16] {
        let config = RunConfig {
            steps: 20,
            workers,
            dims: vec![128, 128],
            ..RunConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(workers), &config, |b, config| {
            b.iter(|| black_box(run(config).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, exchange, monte_carlo, training);
criterion_main!(benches);
