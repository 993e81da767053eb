//! Rayon against the sequential fallback.
//!
//! `batched_forward` measures the row-parallel block kernels; which path it
//! takes is fixed at compile time, so compare
//! `cargo bench --bench parallel` with
//! `cargo bench --bench parallel --no-default-features`.
//! The other groups switch at run time and show both paths in one report.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use swarmpipe::bench::{run_load_balance_with, LoadBalanceConfig};
use swarmpipe::model::{forward_through, HiddenStates, KvCache, Model, ModelConfig};
use swarmpipe::parallel::{is_parallel, map_maybe_parallel};

fn model() -> Model {
    Model::new(ModelConfig::default()).unwrap()
}

fn inputs(m: &Model, rows: usize, salt: u32) -> HiddenStates {
    let tokens: Vec<u32> = (0..rows as u32).map(|i| (i * 31 + salt) % m.config.vocab_size as u32).collect();
    m.client.embed(&tokens, 0)
}

fn batched_forward(c: &mut Criterion) {
    let m = model();
    let backend = if is_parallel() { "rayon" } else { "sequential" };
    let mut g = c.benchmark_group("batched_forward");
    for rows in [64, 512] {
        let x = inputs(&m, rows, 0);
        g.bench_with_input(BenchmarkId::new(backend, rows), &x, |b, x| {
            b.iter(|| {
                let mut caches = vec![KvCache::new(m.config.hidden_dim); m.config.n_blocks];
                forward_through(&m.blocks, x.clone(), &mut caches).unwrap()
            })
        });
    }
    g.finish();
}

fn independent_sequences(c: &mut Criterion) {
    let m = model();
    let batch: Vec<HiddenStates> = (0..32).map(|i| inputs(&m, 48, i)).collect();
    let mut g = c.benchmark_group("independent_sequences");
    for parallel in [false, true] {
        let label = if parallel { "rayon" } else { "sequential" };
        g.bench_function(label, |b| {
            b.iter(|| {
                map_maybe_parallel(parallel, &batch, |x| {
                    let mut caches = vec![KvCache::new(m.config.hidden_dim); m.config.n_blocks];
                    let y = forward_through(&m.blocks, x.clone(), &mut caches).unwrap();
                    y.data.data.iter().sum::<f32>()
                })
            })
        });
    }
    g.finish();
}

fn load_balance_bounds(c: &mut Criterion) {
    let cfg = LoadBalanceConfig {
        minutes: 60,
        ..LoadBalanceConfig::default()
    };
    let mut g = c.benchmark_group("load_balance_60_minutes");
    g.sample_size(10);
    for parallel in [false, true] {
        let label = if parallel { "rayon" } else { "sequential" };
        g.bench_function(label, |b| b.iter(|| run_load_balance_with(&cfg, 0, parallel).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, batched_forward, independent_sequences, load_balance_bounds);
criterion_main!(benches);
