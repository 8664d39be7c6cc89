//! Parallel vs sequential execution of the hot kernels and one full update.
//!
//! Every group runs the same input twice, once with the rayon path enabled
//! and once with `par::set_parallel(false)`. Building without the default
//! `parallel` feature makes both variants sequential.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use nedreamer::config::{Config, NeMode};
use nedreamer::diagnostics::random_batch;
use nedreamer::kernels::{batched_gemm, gemm, im2col, softmax_rows, ConvGeom};
use nedreamer::par;
use nedreamer::trainer::Agent;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for &(m, k, n) in &[(256, 64, 64), (1024, 128, 128), (2048, 256, 256)] {
        let (a, b) = (random(m * k, 1), random(k * n, 2));
        let mut out = vec![0.0; m * n];
        group.throughput(Throughput::Elements((2 * m * k * n) as u64));
        for (label, on) in MODES {
            group.bench_with_input(BenchmarkId::new(label, format!("{m}x{k}x{n}")), &on, |bch, &on| {
                par::set_parallel(on);
                bch.iter(|| gemm(m, k, n, &a, false, &b, false, &mut out, 0.0));
            });
        }
    }
    par::set_parallel(true);
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_scores");
    // batch * heads groups of [T, dh] x [dh, T]
    for &(g, t, dh) in &[(16, 32, 32), (32, 64, 64)] {
        let (q, k) = (random(g * t * dh, 3), random(g * t * dh, 4));
        let mut scores = vec![0.0; g * t * t];
        for (label, on) in MODES {
            group.bench_with_input(BenchmarkId::new(label, format!("{g}x{t}x{dh}")), &on, |bch, &on| {
                par::set_parallel(on);
                bch.iter(|| {
                    batched_gemm(g, t, dh, t, &q, false, &k, true, &mut scores, 0.0);
                    softmax_rows(&scores, t, true)
                });
            });
        }
    }
    par::set_parallel(true);
    group.finish();
}

fn bench_im2col(c: &mut Criterion) {
    let mut group = c.benchmark_group("im2col");
    let geom = ConvGeom { batch: 256, height: 16, width: 16, channels: 8, kernel: 4, stride: 2, pad: 1 };
    let x = random(geom.batch * geom.image_len(), 5);
    for (label, on) in MODES {
        group.bench_with_input(BenchmarkId::new(label, "256x16x16x8"), &on, |bch, &on| {
            par::set_parallel(on);
            bch.iter(|| im2col(&x, &geom));
        });
    }
    par::set_parallel(true);
    group.finish();
}

fn desk_config() -> Config {
    let overrides: Vec<String> = [
        "model.embed_dim=64",
        "model.deter=64",
        "model.latents=8",
        "model.classes=8",
        "model.units=64",
        "model.encoder_channels=[8, 16]",
        "ne.token_dim=64",
        "ne.heads=2",
        "ne.layers=1",
        "behavior.units=64",
        "behavior.layers=1",
        "replay.batch_size=8",
        "replay.batch_length=32",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    Config::from_str_with_overrides("", &overrides).expect("bench config")
}

fn bench_update(c: &mut Criterion) {
    let mut group = c.benchmark_group("agent_update");
    group.sample_size(10);
    let mut cfg = desk_config();
    for mode in [NeMode::Full, NeMode::Reconstruction] {
        cfg.ne.mode = mode;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_batch(cfg.replay.batch_size, cfg.replay.batch_length, cfg.env.image_size, 3, &mut rng);
        for (label, on) in MODES {
            let mut agent = Agent::new(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(1)).expect("agent");
            group.bench_function(BenchmarkId::new(label, mode.as_str()), |bch| {
                par::set_parallel(on);
                bch.iter(|| agent.update(&batch, &mut rng).expect("update"));
            });
        }
    }
    par::set_parallel(true);
    group.finish();
}

criterion_group!(kernels, bench_gemm, bench_attention, bench_im2col);
criterion_group!(training, bench_update);
criterion_main!(kernels, training);
