use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use divgen_core::assembler::rescale;
use divgen_core::backend::{mock_image, WireRequest};
use divgen_core::prompt::{expand, ExpandOptions};
use divgen_core::sampler::{circle_points, sample_embedding};
use divgen_core::{ClassificationTask, ImageSize, PlanRng, SamplePlan, TrickKind};
use image::{Rgb, RgbImage};

fn bench_rescale(c: &mut Criterion) {
    let src = RgbImage::from_fn(512, 512, |x, y| Rgb([(x ^ y) as u8, x as u8, y as u8]));
    let mut g = c.benchmark_group("rescale_512");
    for side in [32u32, 64] {
        for anti_alias in [true, false] {
            let id = BenchmarkId::new(if anti_alias { "box" } else { "nearest" }, side);
            g.bench_with_input(id, &side, |b, &side| {
                b.iter(|| rescale(black_box(&src), ImageSize::square(side), anti_alias).unwrap())
            });
        }
    }
    g.finish();
}

fn bench_expand(c: &mut Criterion) {
    let task = ClassificationTask::preset("cifar10").unwrap();
    let options = ExpandOptions::default();
    c.bench_function("expand_cifar10_all_combined", |b| {
        b.iter(|| {
            let rng = PlanRng::new(0, &task.name, TrickKind::AllCombined);
            expand(&task, TrickKind::AllCombined, &rng, &options).unwrap()
        })
    });
}

fn bench_sampler(c: &mut Criterion) {
    let set = circle_points(60, 1.0);
    let mut g = c.benchmark_group("sample_embedding_60");
    for (name, plan) in [("full_hull", SamplePlan::full_hull(1, 0)), ("k3", SamplePlan::k_subset(3, 1, 0))] {
        let mut rng = plan.rng();
        g.bench_function(name, |b| b.iter(|| sample_embedding(&set, &plan, &mut rng)));
    }
    g.finish();
}

fn bench_mock(c: &mut Criterion) {
    let task = ClassificationTask::preset("cifar10").unwrap();
    let rng = PlanRng::new(0, &task.name, TrickKind::BaseClass);
    let req = expand(&task, TrickKind::BaseClass, &rng, &ExpandOptions::default()).unwrap().remove(0);
    let wire = WireRequest::from(&req);
    c.bench_function("mock_image_512", |b| b.iter(|| mock_image(black_box(&wire))));
}

criterion_group!(benches, bench_rescale, bench_expand, bench_sampler, bench_mock);
criterion_main!(benches);
