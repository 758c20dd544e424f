//! Hot kernels at one thread and at the full pool. Build with
//! `--no-default-features` to time the sequential fallback instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dcl::cluster::{
    default_heads, ClusterConfig, ClusterTrainer, NormRule, PerturbSpec, Terms, VatMode,
};
use dcl::data::{synth_gaussians, SynthSpec};
use dcl::kernels::{conv2d_forward, matmul, ConvGeom, Padding};
use dcl::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn pools() -> Vec<usize> {
    let all = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    if all > 1 {
        vec![1, all]
    } else {
        vec![1]
    }
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("matmul");
    for &(m, k, n) in &[(3500, 64, 64), (3500, 64, 3), (512, 1152, 64)] {
        let a = random(m * k, &mut rng);
        let b = random(k * n, &mut rng);
        for t in pools() {
            g.bench_with_input(
                BenchmarkId::new(format!("{m}x{k}x{n}"), format!("threads={t}")),
                &t,
                |bch, &t| bch.iter(|| par::with_threads(t, || black_box(matmul(&a, &b, m, k, n)))),
            );
        }
    }
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(64 * 3 * 14 * 14, &mut rng);
    let w = random(16 * 3 * 16, &mut rng);
    let geom = ConvGeom::conv(&[64, 3, 14, 14], &[16, 3, 4, 4], 2, Padding::Same).unwrap();
    let mut g = c.benchmark_group("conv2d_64x3x14x14_s2");
    for t in pools() {
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("threads={t}")),
            &t,
            |bch, &t| {
                bch.iter(|| par::with_threads(t, || black_box(conv2d_forward(&x, &w, 64, &geom))))
            },
        );
    }
    g.finish();
}

fn bench_cluster_step(c: &mut Criterion) {
    let (f, _) = synth_gaussians(&SynthSpec::uniform(3, 10, 6.0, 500, 3)).unwrap();
    let prime = f.with_dropout(0.1, 9).unwrap();
    let cfg = ClusterConfig {
        hidden: vec![64, 64],
        heads: default_heads(3, 5, 1, 5),
        init_std: 1e-2,
        lr: 3e-3,
        beta1: 0.9,
        batch_size: 500,
        epochs: 1,
        lambda: 0.2,
        perturb: PerturbSpec {
            alpha_r: 0.3,
            alpha_adv: 0.15,
            replicas: 5,
            norm: NormRule::L2,
        },
        vat_mode: VatMode::Shared,
        terms: Terms::default(),
        seed: 4,
    };
    let mut g = c.benchmark_group("cluster_step_b500");
    g.sample_size(20);
    for t in pools() {
        let mut tr = ClusterTrainer::<f32>::new(10, cfg.clone()).unwrap();
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("threads={t}")),
            &t,
            |bch, &t| {
                bch.iter(|| {
                    par::with_threads(t, || black_box(tr.step(&f.values, &prime.values).unwrap()))
                })
            },
        );
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_conv, bench_cluster_step);
criterion_main!(benches);
