//! Benchmarks for the hot paths: dense matmul, one encoder block forward,
//! a full reverse diffusion chain, and ensemble aggregation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use nestdiff_core::backbone::{self, BackboneConfig, BackboneParams};
use nestdiff_core::diffusion::{self, make_schedule, DenoiseDims, DenoiseParams};
use nestdiff_core::ensemble::{self, CandidateGroup};
use nestdiff_core::numerics::{RngStream, Tensor};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_f32");
    for n in [32usize, 64, 128] {
        let mut rng = RngStream::new(1, 0);
        let a = Tensor::<f32>::gaussian(&mut rng, &[n, n]);
        let b = Tensor::<f32>::gaussian(&mut rng, &[n, n]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| a.matmul(&b).unwrap())
        });
    }
    group.finish();
}

fn toy_backbone() -> (BackboneConfig, BackboneParams<f32>) {
    let cfg = BackboneConfig {
        image_size: 32,
        channels: 1,
        patch_size: 8,
        embed_dim: 64,
        num_blocks: 6,
        num_heads: 4,
        mlp_hidden: 128,
        num_classes: 2,
        tap_levels: 3,
    };
    let mut rng = RngStream::new(2, 0);
    let params = BackboneParams::init(&cfg, &mut rng).unwrap();
    (cfg, params)
}

fn bench_backbone_forward(c: &mut Criterion) {
    let (cfg, params) = toy_backbone();
    let mut rng = RngStream::new(3, 0);
    let x = Tensor::<f32>::gaussian(&mut rng, &[32, 32, 1]);
    c.bench_function("backbone_forward_toy", |b| {
        b.iter(|| backbone::forward(&cfg, &params, &x).unwrap())
    });
}

fn bench_sample_chain(c: &mut Criterion) {
    let dims = DenoiseDims::toy();
    let params = DenoiseParams::<f32>::init(32 * 32, 2, 100, &dims, 0, &RngStream::new(4, 0));
    let schedule = make_schedule(100, 1.0 - 1e-4, 0.98).unwrap();
    let mut rng = RngStream::new(5, 0);
    let x = Tensor::<f32>::gaussian(&mut rng, &[32, 32, 1]);
    let z = Tensor::from_vec(vec![2], vec![0.9f32, 0.1]).unwrap();
    let cond = diffusion::condition(&params, &x).unwrap();
    c.bench_function("sample_chain_t100", |b| {
        b.iter(|| {
            let mut stream = RngStream::new(6, 0);
            diffusion::sample_chain_cond(&z, &params, &cond, &schedule, &mut stream).unwrap()
        })
    });
}

fn bench_aggregate(c: &mut Criterion) {
    let mut rng = RngStream::new(7, 0);
    let groups: Vec<CandidateGroup<f32>> = (0..5)
        .map(|level| CandidateGroup {
            level,
            samples: (0..20).map(|_| Tensor::gaussian(&mut rng, &[2])).collect(),
        })
        .collect();
    c.bench_function("aggregate_upper_100_votes", |b| {
        b.iter(|| ensemble::aggregate_upper(&groups).unwrap())
    });
    c.bench_function("predict_proba_100_samples", |b| {
        b.iter(|| ensemble::predict_proba(&groups, 0.3162).unwrap())
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_backbone_forward,
    bench_sample_chain,
    bench_aggregate
);
criterion_main!(benches);
