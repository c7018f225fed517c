use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use fairstyle_core::*;

fn bench_kl(c: &mut Criterion) {
    let dist = AttributeDistribution::from_counts(
        vec!["a".into(), "b".into(), "c".into(), "d".into()],
        (1..=16u64).map(|i| i * 37).collect(),
    )
    .unwrap();
    c.bench_function("kl_to_uniform_16_cells", |b| {
        b.iter(|| black_box(kl_to_uniform(black_box(&dist))))
    });
}

fn bench_apply(c: &mut Criterion) {
    let spec = SyntheticSpec::single_attribute("attr", 0.2, 7);
    let bundle = make_synthetic(&spec).unwrap();
    let code = bundle.generator.style_code(1).unwrap();
    let tensor = FairStyleTensor::scalar(spec.attributes[0].causal_channel, 0.5);
    c.bench_function("apply_fairstyle_scalar", |b| {
        b.iter(|| black_box(apply_fairstyle(black_box(&code), black_box(&tensor)).unwrap()))
    });
    let ch2 = ChannelId::new(1, 5);
    let affine = FairStyleTensor::affine_from_params(
        &[spec.attributes[0].causal_channel, ch2],
        &[
            bundle.oracle.exact_stats(spec.attributes[0].causal_channel),
            bundle.oracle.exact_stats(ch2),
        ],
        &[0.1, 0.2, -0.3, 0.4],
    )
    .unwrap();
    c.bench_function("apply_fairstyle_affine_pair", |b| {
        b.iter(|| black_box(apply_fairstyle(black_box(&code), black_box(&affine)).unwrap()))
    });
}

fn bench_render_and_score(c: &mut Criterion) {
    let spec = SyntheticSpec::single_attribute("attr", 0.2, 7);
    let bundle = make_synthetic(&spec).unwrap();
    let code = bundle.generator.style_code(1).unwrap();
    c.bench_function("synthetic_render", |b| {
        b.iter(|| black_box(bundle.generator.render(black_box(&code)).unwrap()))
    });
    let image = bundle.generator.render(&code).unwrap();
    c.bench_function("classifier_score", |b| {
        b.iter(|| black_box(bundle.classifiers[0].score(black_box(&image)).unwrap()))
    });
}

fn bench_discovery_sweep(c: &mut Criterion) {
    let spec = SyntheticSpec::single_attribute("attr", 0.2, 7);
    let bundle = make_synthetic(&spec).unwrap();
    let config = DiscoveryConfig { batch_size: 32, ..Default::default() };
    c.bench_function("discovery_sweep_32_codes", |b| {
        b.iter_batched(
            || (),
            |_| {
                black_box(
                    find_controlling_channel(&bundle.generator, &bundle.classifiers[0], &config)
                        .unwrap(),
                )
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_optimizer_iteration(c: &mut Criterion) {
    let spec = SyntheticSpec::single_attribute("attr", 0.2, 7);
    let bundle = make_synthetic(&spec).unwrap();
    let config = OptimizerConfig {
        batch_size: 128,
        max_iterations: 5,
        tolerance: 1e-12,
        seed: 3,
        ..Default::default()
    };
    c.bench_function("optimize_single_5_iterations_n128", |b| {
        b.iter(|| {
            black_box(
                optimize_single(
                    &bundle.generator,
                    &bundle.classifiers[0] as &dyn ClassifierAdapter,
                    spec.attributes[0].causal_channel,
                    &config,
                )
                .unwrap(),
            )
        })
    });
}

criterion_group!(
    benches,
    bench_kl,
    bench_apply,
    bench_render_and_score,
    bench_discovery_sweep,
    bench_optimizer_iteration
);
criterion_main!(benches);
