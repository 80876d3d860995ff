use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ppac_bench::{combination_layer, uniform};
use ppac_core::adaptive::{adaptive_conv_backward, adaptive_conv_forward, conv2d_forward, Activation, ConvParams, NormalizationMode};
use ppac_core::net::{NetInputs, NetKind, RefinementNet, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn adaptive(c: &mut Criterion) {
    let mut group = c.benchmark_group("adaptive_conv");
    group.sample_size(20);
    for mode in [NormalizationMode::None, NormalizationMode::Kernel, NormalizationMode::Advanced] {
        let (input, params, cfg) = combination_layer(96, 128, mode);
        group.bench_with_input(BenchmarkId::new("forward", format!("{mode:?}")), &mode, |b, _| {
            b.iter(|| adaptive_conv_forward(&input, &params, cfg.clone()).unwrap())
        });
        let (out, cache) = adaptive_conv_forward(&input, &params, cfg.clone()).unwrap();
        let grad = out.map(|_| 1.0);
        group.bench_with_input(BenchmarkId::new("backward", format!("{mode:?}")), &mode, |b, _| {
            b.iter(|| adaptive_conv_backward(&cache, &grad).unwrap())
        });
    }
    group.finish();
}

fn dense(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = uniform(&mut rng, [1, 16, 96, 128], -1.0, 1.0);
    let params = ConvParams::new(uniform(&mut rng, [16, 16, 3, 3], -0.1, 0.1), vec![0.0; 16]).unwrap();
    c.bench_function("conv2d_16x16_3x3", |b| b.iter(|| conv2d_forward(&input, &params, Activation::Relu).unwrap()));
}

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("network_forward");
    group.sample_size(10);
    let inputs = NetInputs::<f32>::random(Task::Flow, 1, 96, 128, &mut ChaCha8Rng::seed_from_u64(2));
    for kind in [NetKind::Ppac, NetKind::Pac, NetKind::Simple] {
        let net = RefinementNet::<f32>::build(kind, Task::Flow, 0).unwrap();
        group.bench_function(kind.tag(), |b| b.iter(|| net.forward(&inputs).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, adaptive, dense, network);
criterion_main!(benches);
