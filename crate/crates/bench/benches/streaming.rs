use chunkflow_bench::fixture;
use chunkflow_core::dit::ModelConfig;
use chunkflow_core::runtime::config::PipelineConfig;
use chunkflow_core::runtime::pipeline::stream;
use chunkflow_core::scheduler::{rollout, RolloutOptions};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn chunk_rollout(c: &mut Criterion) {
    let mut g = c.benchmark_group("rollout");
    for chunks in [4usize, 16] {
        let f = fixture(ModelConfig::tiny(), chunks, 1);
        for recache in [false, true] {
            let opts = RolloutOptions {
                clean_recache: recache,
                ..RolloutOptions::default()
            };
            let id = BenchmarkId::new(if recache { "clean_recache" } else { "cached" }, chunks);
            g.bench_with_input(id, &chunks, |b, &n| {
                b.iter(|| rollout(&f.model, &f.reference, &f.audio, n, opts.clone()).unwrap())
            });
        }
    }
    g.finish();
}

fn pipeline(c: &mut Criterion) {
    let f = fixture(ModelConfig::tiny(), 8, 2);
    let cfg = PipelineConfig {
        num_chunks: 8,
        ..PipelineConfig::default()
    };
    c.bench_function("stream_8_chunks", |b| {
        b.iter(|| black_box(stream(&cfg, &f.model, &f.reference, &f.audio).unwrap().chunks.len()))
    });
}

criterion_group!(benches, chunk_rollout, pipeline);
criterion_main!(benches);
