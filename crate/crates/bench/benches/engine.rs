use aliascope::nn::gemm::gemm;
use aliascope::nn::ops::{conv2d, conv2d_backward};
use aliascope::nn::ConvGeometry;
use aliascope::{analyze_sample, build_model, pgd_attack, AttackConfig, Family, ModelSpec, ThresholdRule};
use aliascope_bench::{images, labels, uniform};
use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let (m, n, k) = (32, 1024, 288);
    let (a, b) = (uniform(1, m * k), uniform(2, k * n));
    let mut out = vec![0.0f32; m * n];
    let mut group = c.benchmark_group("gemm");
    group.throughput(Throughput::Elements((m * n * k) as u64));
    group.bench_function("32x1024x288", |bench| {
        bench.iter(|| gemm(m, n, k, black_box(&a), black_box(&b), &mut out))
    });
    group.finish();
}

fn convolution(c: &mut Criterion) {
    let x = images(3, [16, 16, 32, 32]);
    let mut group = c.benchmark_group("conv3x3");
    for stride in [1, 2] {
        let geom = ConvGeometry::new(16, 32, 3, stride, 1);
        let w = uniform(4, 32 * 16 * 9);
        let y = conv2d(&x, &w, None, &geom).unwrap();
        let dy = images(5, y.dims());
        group.bench_function(format!("forward/s{stride}"), |b| {
            b.iter(|| conv2d(black_box(&x), &w, None, &geom).unwrap())
        });
        group.bench_function(format!("backward/s{stride}"), |b| {
            b.iter(|| conv2d_backward(black_box(&x), &w, false, &geom, &dy, true).unwrap())
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let spec = ModelSpec::resnet(Family::ResnetC, 16, 2, 100, 32);
    let mut model = build_model::<f32>(&spec, 0).unwrap();
    let x = images(6, [32, 1, 32, 32]);
    let y = labels(32, 100);
    let mut group = c.benchmark_group("resnet-c-w16-d2");
    group.sample_size(10);
    group.bench_function("train-step/batch32", |b| {
        b.iter(|| model.network.loss_and_grads(black_box(&x), &y).unwrap())
    });

    model.network.init_running_stats();
    let one = images(7, [1, 1, 32, 32]);
    let rule = ThresholdRule::default();
    group.bench_function("analyze-sample", |b| {
        b.iter(|| analyze_sample(&model.network, black_box(&one), 0, &rule).unwrap())
    });
    let attack = AttackConfig {
        epsilon: 0.02,
        steps: 5,
        ..AttackConfig::default()
    };
    group.bench_function("pgd-5-steps/batch32", |b| {
        b.iter(|| pgd_attack(&model.network, black_box(&x), &y, &attack).unwrap())
    });
    group.finish();
}

criterion_group!(benches, matmul, convolution, network);
criterion_main!(benches);
