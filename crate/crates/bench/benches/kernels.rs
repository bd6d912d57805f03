use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use noarb_bench::baseline;
use noarb_core::constraints::{penalty_loss, total_cost};
use noarb_core::network::DerivativeMode;
use noarb_core::training::{train, Objective};
use noarb_core::{ModelMode, PenaltyConfig, TrainConfig};

fn forward(c: &mut Criterion) {
    let (_, _, net) = baseline();
    let x = [0.9, 1.5];
    let mut g = c.benchmark_group("forward");
    for (name, mode) in [("value", DerivativeMode::Value), ("diagonal", DerivativeMode::Diagonal), ("full", DerivativeMode::Full)] {
        g.bench_function(name, |b| b.iter(|| net.derivatives(black_box(&x), mode).unwrap()));
    }
    g.finish();
}

fn losses(c: &mut Criterion) {
    let (data, mesh, net) = baseline();
    let cfg = PenaltyConfig::baseline();
    c.bench_function("penalty_loss_mesh", |b| b.iter(|| penalty_loss(black_box(&net), &mesh, &cfg, 0.04, None).unwrap()));
    c.bench_function("total_cost", |b| b.iter(|| total_cost(black_box(&net), &data, &mesh, &cfg, 0.04).unwrap()));
}

fn epochs(c: &mut Criterion) {
    let (data, mesh, _) = baseline();
    let cfg = TrainConfig { epochs: 20, ..TrainConfig::default() };
    let mut g = c.benchmark_group("train_20_epochs");
    g.sample_size(10);
    for mode in ModelMode::ALL {
        let objective = Objective::new(mode, PenaltyConfig::baseline(), 0.04);
        g.bench_function(mode.name(), |b| b.iter(|| train(&data, &mesh, &cfg, &objective).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, forward, losses, epochs);
criterion_main!(benches);
