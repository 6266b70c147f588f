//! Parallel vs sequential throughput on the per-image kernels: structural
//! target extraction and whole-model inference. `par_map` uses rayon under
//! the default `parallel` feature and equals `seq_map` without it.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use carident::data::{render_image, SyntheticSpec};
use carident::detector::{AblationFlags, Model, ModelConfig};
use carident::imgproc::{downsample_avg, struct_target_of_image, RgbImage};
use carident::par::{par_map, seq_map};

fn corpus(n: usize) -> Vec<RgbImage> {
    let spec = SyntheticSpec {
        train: n,
        val: 0,
        test: 0,
        pretrain: 0,
        ..SyntheticSpec::default()
    };
    (0..n as u64).map(|i| render_image(&spec, i).rgb).collect()
}

fn bench_struct_targets(c: &mut Criterion) {
    let images = corpus(64);
    let mut group = c.benchmark_group("struct_target");
    let work = |img: &RgbImage| {
        let t = struct_target_of_image(img).unwrap();
        downsample_avg(&t, 8).unwrap().data().iter().sum::<f64>()
    };
    group.bench_with_input(BenchmarkId::new("seq", images.len()), &images, |b, imgs| {
        b.iter(|| seq_map(imgs, work))
    });
    group.bench_with_input(BenchmarkId::new("par", images.len()), &images, |b, imgs| {
        b.iter(|| par_map(imgs, work))
    });
    group.finish();
}

fn bench_inference(c: &mut Criterion) {
    let images = corpus(16);
    let model = Model::new(ModelConfig::toy(3, 42)).unwrap();
    let flags = AblationFlags::default();
    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    let infer = |img: &RgbImage| model.infer(img, 12, &flags, 0.0).unwrap().len();
    group.bench_with_input(BenchmarkId::new("seq", images.len()), &images, |b, imgs| {
        b.iter(|| seq_map(imgs, infer))
    });
    group.bench_with_input(BenchmarkId::new("par", images.len()), &images, |b, imgs| {
        b.iter(|| par_map(imgs, infer))
    });
    group.finish();
}

criterion_group!(benches, bench_struct_targets, bench_inference);
criterion_main!(benches);
