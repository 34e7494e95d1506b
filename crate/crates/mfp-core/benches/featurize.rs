//! Benchmarks for the data-parallel hot paths.
//!
//! `generate_samples` fans out per DIMM through rayon when the `parallel`
//! feature (default) is on. The `sequential` arms here run the same work on
//! a one-thread pool for an in-build comparison; `cargo bench
//! --no-default-features` measures the true sequential fallback, where the
//! two arms coincide.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use mfp_core::bsfe::{bsfe_2d, default_pooling, SparseBinaryMatrix};
use mfp_core::ce_model::Geometry;
use mfp_core::hierarchy::{generate_samples, FeaturizeConfig};
use mfp_core::synth::{generate_corpus, SynthConfig};

fn bench_bsfe_2d(c: &mut Criterion) {
    let geometry = Geometry::default();
    let mut rng = ChaCha12Rng::seed_from_u64(1);

    // bit-level scale: 8x4 with a few set cells
    let mut bit = SparseBinaryMatrix::new(geometry.n_beat, geometry.n_dq).unwrap();
    for _ in 0..4 {
        bit.insert(
            rng.random_range(0..geometry.n_beat),
            rng.random_range(0..geometry.n_dq),
        )
        .unwrap();
    }
    c.bench_function("bsfe_2d/bit_8x4", |b| {
        b.iter(|| bsfe_2d(std::hint::black_box(&bit), &default_pooling(), false).unwrap())
    });

    // bank-level scale: 131072x1024 occupancy with a few hundred cells
    let mut bank = SparseBinaryMatrix::new(geometry.n_row, geometry.n_col).unwrap();
    for _ in 0..200 {
        bank.insert(
            rng.random_range(0..geometry.n_row),
            rng.random_range(0..geometry.n_col),
        )
        .unwrap();
    }
    c.bench_function("bsfe_2d/bank_sparse_200", |b| {
        b.iter(|| bsfe_2d(std::hint::black_box(&bank), &default_pooling(), true).unwrap())
    });
}

fn bench_generate_samples(c: &mut Criterion) {
    let geometry = Geometry::default();
    let synth = SynthConfig {
        n_dimms: 40,
        fault_fraction: 0.3,
        horizon_days: 10.0,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&synth, &geometry).unwrap();
    let cfg = FeaturizeConfig::default();

    let mut group = c.benchmark_group("generate_samples_40_dimms");
    group.sample_size(10);
    group.bench_function("default", |b| {
        b.iter(|| generate_samples(&corpus.events, &corpus.failures, &cfg, &geometry).unwrap())
    });
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        group.bench_function("sequential", |b| {
            b.iter(|| {
                pool.install(|| {
                    generate_samples(&corpus.events, &corpus.failures, &cfg, &geometry).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_corpus_generation(c: &mut Criterion) {
    let geometry = Geometry::default();
    let synth = SynthConfig {
        n_dimms: 100,
        ..SynthConfig::default()
    };
    let mut group = c.benchmark_group("generate_corpus_100_dimms");
    group.sample_size(10);
    group.bench_function("default", |b| {
        b.iter(|| generate_corpus(&synth, &geometry).unwrap())
    });
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        group.bench_function("sequential", |b| {
            b.iter(|| pool.install(|| generate_corpus(&synth, &geometry).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_bsfe_2d,
    bench_generate_samples,
    bench_corpus_generation
);
criterion_main!(benches);
