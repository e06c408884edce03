use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use esrie_bench::{cyst2_image, models};
use esrie_core::net::{forward, Branch};

fn forward_paths(c: &mut Criterion) {
    let mut g = c.benchmark_group("fused_forward");
    g.sample_size(20);
    for size in [128, 256] {
        let img = cyst2_image(size).unwrap();
        let (m, im) = models(&img).unwrap();
        g.bench_with_input(BenchmarkId::new("f32", size), &img, |b, img| {
            b.iter(|| forward(&m, img, Branch::Fused).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("int8", size), &img, |b, img| {
            b.iter(|| im.forward(img, Branch::Fused).unwrap())
        });
    }
    g.finish();
}

fn branches(c: &mut Criterion) {
    let img = cyst2_image(256).unwrap();
    let (m, im) = models(&img).unwrap();
    let mut g = c.benchmark_group("branch_int8");
    g.sample_size(20);
    for b in [Branch::Despeckle, Branch::Deblur] {
        g.bench_function(b.name(), |bench| bench.iter(|| im.forward(&img, b).unwrap()));
        g.bench_function(format!("{}_f32", b.name()), |bench| bench.iter(|| forward(&m, &img, b).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, forward_paths, branches);
criterion_main!(benches);
