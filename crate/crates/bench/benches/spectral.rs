use aliascope::{classify, dft2, ThresholdRule};
use aliascope_bench::grid;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn transforms(c: &mut Criterion) {
    let mut group = c.benchmark_group("dft2");
    // Powers of two take the radix-2 path, 24 the direct sum.
    for size in [16, 24, 32, 64] {
        let x = grid(1, size, size);
        group.bench_with_input(BenchmarkId::from_parameter(size), &x, |b, x| {
            b.iter(|| dft2(black_box(x)))
        });
    }
    group.finish();
}

fn classification(c: &mut Criterion) {
    let rule = ThresholdRule::default();
    let mut group = c.benchmark_group("classify");
    for (size, r) in [(32, 2), (64, 2), (64, 4)] {
        let s = dft2(&grid(2, size, size));
        group.bench_function(format!("{size}x{size}/r{r}"), |b| {
            b.iter(|| classify(black_box(&s), r, &rule).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, transforms, classification);
criterion_main!(benches);
