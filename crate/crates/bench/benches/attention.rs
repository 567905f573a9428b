use attnprof_bench::qkv;
use attnprof_core::modelzoo::{full_attention, nystrom_attention, sliding_window_attention};
use attnprof_core::numkernel::Graph;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const D: usize = 256;
const HEADS: usize = 4;

fn attention_variants(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    for n in [256, 512, 1024, 2048] {
        group.bench_with_input(BenchmarkId::new("full", n), &n, |b, &n| {
            let g = Graph::inference();
            let (q, k, v) = qkv(&g, n, D);
            b.iter(|| full_attention(&g, &q, &k, &v, 1, n, HEADS).unwrap());
        });
        group.bench_with_input(BenchmarkId::new("sliding-512", n), &n, |b, &n| {
            let g = Graph::inference();
            let (q, k, v) = qkv(&g, n, D);
            b.iter(|| sliding_window_attention(&g, &q, &k, &v, 1, n, HEADS, 512, true).unwrap());
        });
        group.bench_with_input(BenchmarkId::new("nystrom-64", n), &n, |b, &n| {
            let g = Graph::inference();
            let (q, k, v) = qkv(&g, n, D);
            b.iter(|| nystrom_attention(&g, &q, &k, &v, 1, n, HEADS, 64, 6).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, attention_variants);
criterion_main!(benches);
