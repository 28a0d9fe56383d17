//! Serial vs data-parallel NIAH grid evaluation and per-example gradients.
//!
//! Build with `--no-default-features` to compare against the sequential
//! fallback of the parallel helpers.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rhzn_core::mdlm::{init_model, ModelCheckpoint, ModelConfig, ModelMode, SamplerConfig};
use rhzn_core::niah::{run_grid_with, Execution, NiahSpec};
use rhzn_core::par;
use rhzn_core::rope::RopeConfig;

fn small_model() -> ModelCheckpoint {
    let mode = ModelMode::BidirectionalMdlm;
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 64,
        n_heads: 2,
        head_dim: 32,
        ffn_dim: 256,
        rope: RopeConfig::new(32, 10_000.0, 256).unwrap(),
        ..ModelConfig::toy(mode)
    };
    init_model(cfg, 7).unwrap()
}

fn grid(c: &mut Criterion) {
    let ck = small_model();
    let spec = NiahSpec {
        context_lengths: vec![64, 128, 256],
        depths: vec![0.0, 0.5, 1.0],
        trials_per_cell: 2,
        gen_len: 8,
        ..NiahSpec::default()
    };
    let sampler = SamplerConfig {
        gen_len: 8,
        block_len: 8,
        steps: 4,
        ..SamplerConfig::default()
    };
    let mut g = c.benchmark_group("niah_grid");
    g.sample_size(10);
    for (name, exec) in [("serial", Execution::Serial), ("parallel", Execution::Parallel)] {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_grid_with(&ck, &spec, &sampler, None, exec).unwrap())
        });
    }
    g.finish();
}

fn map(c: &mut Criterion) {
    let work = |i: usize| (0..20_000).map(|j| ((i * j) as f64).sqrt().sin()).sum::<f64>();
    let mut g = c.benchmark_group("map_indexed");
    g.bench_function("serial", |b| b.iter(|| par::map_indexed_serial(64, work)));
    g.bench_function("parallel", |b| b.iter(|| par::map_indexed(64, work)));
    g.finish();
}

criterion_group!(benches, grid, map);
criterion_main!(benches);
