use criterion::{criterion_group, criterion_main, Criterion};

fn workloads(c: &mut Criterion) {
    let mut g = c.benchmark_group("workloads");
    g.sample_size(10);
    g.bench_function("mirroring_200", |b| {
        b.iter(|| stormsim_bench::mirroring(200).unwrap())
    });
    g.bench_function("random_reads_8qp", |b| {
        b.iter(|| stormsim_bench::random_reads(8).unwrap())
    });
    g.bench_function("kv_lookups_50us", |b| {
        b.iter(|| stormsim_bench::kv_lookups(50_000).unwrap())
    });
    g.finish();
}

criterion_group!(benches, workloads);
criterion_main!(benches);
