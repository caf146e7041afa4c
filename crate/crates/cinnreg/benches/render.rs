//! Compares the data-parallel renderer against the sequential fallback,
//! and does the same for a batch of posterior draws pushed through the
//! flow. Run with `cargo bench` (parallel path) or
//! `cargo bench --no-default-features` to see only the sequential side.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cinnreg::cinn::{FlowConfig, FlowModel};
use cinnreg::drr::{render_drr_par, render_drr_seq, CameraConfig};
use cinnreg::geometry::Pose;
use cinnreg::nncore::Tensor;
use cinnreg::phantom::{make_phantom, PhantomSpec};
use cinnreg::rng::stream;
use rand::Rng;

fn bench_render(c: &mut Criterion) {
    let volume = make_phantom(&PhantomSpec::default()).unwrap();
    let camera = CameraConfig::default();
    let pose = Pose {
        tx: 4.0,
        ty: -6.0,
        tz: 2.0,
        lao: 35.0,
        cran: -10.0,
    };

    let mut group = c.benchmark_group("render_drr");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("seq", "64x64"), |b| {
        b.iter(|| render_drr_seq(&volume, &pose, &camera).unwrap())
    });
    group.bench_function(BenchmarkId::new("par", "64x64"), |b| {
        b.iter(|| render_drr_par(&volume, &pose, &camera).unwrap())
    });
    group.finish();
}

fn bench_flow_batch(c: &mut Criterion) {
    let cfg = FlowConfig::default();
    let mut flow = FlowModel::new(&cfg, 7);
    let batch = 256;
    let mut rng = stream(7, 1);
    let mut z = Tensor::zeros(&[batch, 5]);
    for v in &mut z.data {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut cond = Tensor::zeros(&[batch, cfg.cond_dim]);
    for v in &mut cond.data {
        *v = rng.gen_range(-1.0..1.0);
    }

    let mut group = c.benchmark_group("flow_inverse");
    group.sample_size(30);
    group.bench_function(BenchmarkId::new("batch", batch), |b| {
        b.iter(|| flow.inverse(&z, &cond))
    });
    group.finish();
}

criterion_group!(benches, bench_render, bench_flow_batch);
criterion_main!(benches);
