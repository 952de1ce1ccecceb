use criterion::{black_box, criterion_group, criterion_main, Criterion};
use deltak_bench::{demo_context, wave};
use deltak_core::config::{RunConfig, DEMO_CONFIG};
use deltak_core::engine::{loss_and_gradient, optimize_alpha};
use deltak_core::tensor::scaled_dot_attention;
use deltak_core::{init_model, run_delta_k, SchedulerConfig};

fn attention(c: &mut Criterion) {
    let q = wave(64, 16, 0.0);
    let k = wave(8, 16, 1.0);
    let v = wave(8, 16, 2.0);
    c.bench_function("attention 64x8 d16", |b| b.iter(|| scaled_dot_attention(black_box(&q), &k, &v).unwrap()));
}

fn objective(c: &mut Criterion) {
    let ctx = demo_context();
    let sched = SchedulerConfig::default();
    c.bench_function("loss and gradient", |b| b.iter(|| loss_and_gradient(black_box(0.02), &ctx)));
    c.bench_function("optimize alpha", |b| b.iter(|| optimize_alpha(black_box(&ctx), &sched, 0.0)));
}

fn full_run(c: &mut Criterion) {
    let cfg = RunConfig::parse(DEMO_CONFIG).unwrap();
    let model = init_model(&cfg.denoiser).unwrap();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("demo run", |b| {
        b.iter(|| run_delta_k(&cfg.prompt, &model, &cfg.oracle, &cfg.scheduler, cfg.seed).unwrap())
    });
    group.finish();
}

criterion_group!(benches, attention, objective, full_run);
criterion_main!(benches);
