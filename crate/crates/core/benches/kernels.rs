//! Rayon versus sequential execution of the hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use unitlab::data::{make_synthetic_domains, SyntheticTransform};
use unitlab::evaluation::{dataset_pixel_accuracy, Image8, PixelAccuracyConfig};
use unitlab::model::{ModelSpec, TranslationArch};
use unitlab::parallel::with_sequential;
use unitlab::tensor::{gemm, Mat};
use unitlab::trainer::{Trainer, TrainerConfig};

fn modes<R>(c: &mut Criterion, group: &str, size: usize, mut f: impl FnMut() -> R) {
    let mut g = c.benchmark_group(group);
    g.bench_with_input(BenchmarkId::new("rayon", size), &size, |b, _| b.iter(|| black_box(f())));
    g.bench_with_input(BenchmarkId::new("sequential", size), &size, |b, _| b.iter(|| with_sequential(|| black_box(f()))));
    g.finish();
}

fn bench_gemm(c: &mut Criterion) {
    for n in [64usize, 256] {
        let a: Vec<f32> = (0..n * n).map(|i| (i % 13) as f32 * 0.1).collect();
        let b: Vec<f32> = (0..n * n).map(|i| (i % 7) as f32 * 0.2).collect();
        let mut out = vec![0f32; n * n];
        modes(c, "gemm", n, || {
            gemm(Mat::new(&a, n, n), Mat::new(&b, n, n), 0.0, &mut out);
            out[0]
        });
    }
}

fn bench_pixel_accuracy(c: &mut Criterion) {
    let n = 256;
    let imgs: Vec<Image8> = (0..n)
        .map(|k| Image8::new(3, 64, 64, (0..3 * 64 * 64).map(|i| ((i * 31 + k) % 256) as u8).collect()).unwrap())
        .collect();
    let gts: Vec<Image8> = imgs.iter().rev().cloned().collect();
    let cfg = PixelAccuracyConfig::default();
    modes(c, "pixel_accuracy", n, || dataset_pixel_accuracy(&imgs, &gts, &cfg).unwrap().0);
}

fn bench_iteration(c: &mut Criterion) {
    let (d1, d2, _) = make_synthetic_domains(0, 16, 32, SyntheticTransform::IntensityInvert).unwrap();
    let spec = ModelSpec::translation(&TranslationArch::desk(), 3, 3, 32);
    let cfg = TrainerConfig { batch_size: 8, ..Default::default() };
    let mut t = Trainer::<f32>::new(&spec, cfg).unwrap();
    modes(c, "train_iteration", 8, || t.iteration(&d1, &d2).unwrap().total);
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_gemm, bench_pixel_accuracy, bench_iteration
}
criterion_main!(benches);
