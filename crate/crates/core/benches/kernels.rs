//! Kernel throughput with one worker against the full rayon pool.
//!
//! Built with `--no-default-features` both cases run the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reactnet::arch::{build_network_for, Network, Scale, Variant};
use reactnet::bitkernel::{binary_conv2d, BinaryConvParams};
use reactnet::layers::real_conv2d;
use reactnet::loss::cross_entropy_backward;
use reactnet::{pack, FloatTensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> FloatTensor {
    FloatTensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Thread counts to compare: 1 and whatever the default pool uses.
fn pools() -> Vec<(usize, rayon::ThreadPool)> {
    let mut counts = vec![1, rayon::current_num_threads()];
    counts.dedup();
    counts
        .into_iter()
        .map(|n| (n, rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()))
        .collect()
}

fn mode() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    }
}

fn conv_kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[16, 64, 16, 16], &mut rng).map(|v| if v > 0.0 { 1.0 } else { -1.0 });
    let w = random(&[64, 64, 3, 3], &mut rng);
    let packed = pack(&x).unwrap();
    let params = BinaryConvParams::new(w.clone()).unwrap();

    let mut group = c.benchmark_group(format!("conv3x3_64ch_16x16_batch16/{}", mode()));
    for (threads, pool) in pools() {
        group.bench_with_input(BenchmarkId::new("binary", threads), &threads, |b, _| {
            pool.install(|| b.iter(|| binary_conv2d(&packed, &params, 1, 1).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("real", threads), &threads, |b, _| {
            pool.install(|| b.iter(|| real_conv2d(&x, &w, 1, 1, 1).unwrap()))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = build_network_for(Variant::reactnet_a(), Scale::Desk, [1, 28, 28], 10);
    let mut net = Network::new(&spec, &mut rng).unwrap();
    let x = random(&[16, 1, 28, 28], &mut rng);
    let labels: Vec<usize> = (0..16).map(|i| i % 10).collect();

    let mut group = c.benchmark_group(format!("desk_reactnet_train_step_batch16/{}", mode()));
    group.sample_size(10);
    for (threads, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, _| {
            pool.install(|| {
                b.iter(|| {
                    let (logits, tape) = net.forward_train(&x).unwrap();
                    let upstream = cross_entropy_backward(&logits, &labels).unwrap();
                    net.backward(&tape, &upstream).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv_kernels, train_step);
criterion_main!(benches);
