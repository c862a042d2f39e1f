use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use rectisplat::deform::{DeformConfig, DeformationNet, FrameAttributes};
use rectisplat::render::{render, render_backward, RenderSettings};
use rectisplat::ssm::{scan_log_depth, scan_sequential, SelectiveSsm, SsmConfig};
use rectisplat_bench::{camera, random_cloud};

fn rasterizer(c: &mut Criterion) {
    let cam = camera(128);
    let settings = RenderSettings::default();
    let mut g = c.benchmark_group("render");
    g.sample_size(20);
    for n in [500, 2000] {
        let attrs = FrameAttributes::from_cloud(&random_cloud(n, 1), 0);
        g.bench_with_input(BenchmarkId::new("forward", n), &attrs, |b, a| {
            b.iter(|| render(black_box(a), &cam, &settings).unwrap())
        });
        let (out, record) = render(&attrs, &cam, &settings).unwrap();
        let d_rgb = vec![1e-3; out.rgb.len()];
        let d_alpha = vec![1e-3; out.alpha.len()];
        g.bench_with_input(BenchmarkId::new("backward", n), &attrs, |b, a| {
            b.iter(|| render_backward(black_box(a), &record, &d_rgb, &d_alpha).unwrap())
        });
    }
    g.finish();
}

fn scans(c: &mut Criterion) {
    let width = 11 * 16;
    let mut g = c.benchmark_group("scan");
    for len in [8, 64, 512] {
        let a: Vec<f64> = (0..len * width).map(|i| 0.5 + 0.4 * ((i as f64) * 0.37).sin()).collect();
        let b: Vec<f64> = (0..len * width).map(|i| ((i as f64) * 0.11).cos()).collect();
        g.bench_with_input(BenchmarkId::new("sequential", len), &len, |bch, _| {
            bch.iter(|| scan_sequential(black_box(&a), black_box(&b), width))
        });
        g.bench_with_input(BenchmarkId::new("log_depth", len), &len, |bch, _| {
            bch.iter(|| scan_log_depth(black_box(&a), black_box(&b), width))
        });
    }
    g.finish();
}

fn networks(c: &mut Criterion) {
    let cloud = random_cloud(2000, 2);
    let net = DeformationNet::new(DeformConfig::default(), 3);
    c.bench_function("deform/2000", |b| b.iter(|| net.deform(black_box(&cloud), 0.5, 0).unwrap()));

    let ssm = SelectiveSsm::new(SsmConfig::default(), 4);
    let xs: Vec<f64> = (0..16 * ssm.config.channels).map(|i| ((i as f64) * 0.21).sin()).collect();
    c.bench_function("ssm/forward_len16", |b| b.iter(|| ssm.forward(black_box(&xs)).unwrap()));
}

criterion_group!(benches, rasterizer, scans, networks);
criterion_main!(benches);
