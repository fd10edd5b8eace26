use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use styleaug_bench::fixture;
use styleaug_core::guidance::{gis, DEFAULT_PROMPT};
use styleaug_core::translator::Stylizer;

fn stylize_vs_gis(c: &mut Criterion) {
    let f = fixture(16);
    let mut g = c.benchmark_group("inference_32px");
    g.sample_size(10);

    g.throughput(Throughput::Elements(f.faces.len() as u64));
    g.bench_function(BenchmarkId::new("stylize_batch", f.faces.len()), |b| {
        b.iter(|| f.generator.stylize_batch(&f.faces).unwrap())
    });

    g.throughput(Throughput::Elements(1));
    for t0 in [0.6, 1.0] {
        g.bench_function(BenchmarkId::new("gis_per_image", t0), |b| {
            b.iter(|| gis(&f.denoiser, &f.vocab, &f.faces[0], t0, DEFAULT_PROMPT, 7, &f.sched).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, stylize_vs_gis);
criterion_main!(benches);
