use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use decomo_core::motionfeat::HornSchunck;
use decomo_core::synthdata::{render_clip, SceneSpec};
use decomo_core::Tensor;

fn ramp(n: usize, k: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * k).sin()).collect()
}

fn conv2d(c: &mut Criterion) {
    let x = Tensor::var(ramp(8 * 16 * 16 * 16, 0.37), &[8, 16, 16, 16]).unwrap();
    let w = Tensor::var(ramp(16 * 16 * 3 * 3, 0.11), &[16, 16, 3, 3]).unwrap();
    c.bench_function("conv2d_8x16x16x16_k3_forward", |b| b.iter(|| black_box(x.conv2d(&w, 1).unwrap())));
    c.bench_function("conv2d_8x16x16x16_k3_backward", |b| {
        b.iter(|| {
            let y = x.conv2d(&w, 1).unwrap().sum_all();
            black_box(y.backward().unwrap())
        })
    });
}

fn matmul(c: &mut Criterion) {
    let a = Tensor::var(ramp(256 * 64, 0.13), &[256, 64]).unwrap();
    let b = Tensor::var(ramp(64 * 128, 0.29), &[64, 128]).unwrap();
    c.bench_function("matmul_256x64x128_forward_backward", |bn| {
        bn.iter(|| black_box(a.matmul(&b).unwrap().sum_all().backward().unwrap()))
    });
}

fn horn_schunck(c: &mut Criterion) {
    let spec = SceneSpec::all()[17];
    let clip = render_clip(&spec, 8, 16, 16, 3).unwrap();
    let hs = HornSchunck::default();
    c.bench_function("horn_schunck_8x16x16", |b| b.iter(|| black_box(hs.estimate(clip.frames.view()).unwrap())));
}

criterion_group!(benches, conv2d, matmul, horn_schunck);
criterion_main!(benches);
