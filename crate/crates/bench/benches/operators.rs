use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use kpsr::data::{featurize_windows, make_windows};
use kpsr::env::{rollout, shipped};
use kpsr::link::fit_links;
use kpsr::operators::{covariance, fit_bundle, fit_forward};
use kpsr::{FeatureMaps, FeatureSpecs, WindowSample};

const RIDGE: f64 = 1e-3;
const CAP: usize = 4096;

fn tab3_windows(n: usize) -> (Vec<WindowSample>, FeatureMaps) {
    let env = shipped::tab3();
    let episodes = n / 37 + 1;
    let mut samples = make_windows(&rollout(&env, episodes, 40, 1).unwrap(), 2, 1).unwrap();
    samples.truncate(n);
    let m = env.tabular().unwrap();
    let maps = FeatureMaps::new(FeatureSpecs::one_hot(m.actions(), m.observations()), 2, 1).unwrap();
    (samples, maps)
}

fn featurize(c: &mut Criterion) {
    let (samples, maps) = tab3_windows(10_000);
    c.bench_function("featurize_10k", |b| b.iter(|| featurize_windows(&samples, &maps).unwrap()));
}

fn gram(c: &mut Criterion) {
    let mut group = c.benchmark_group("domain_gram");
    for n in [5_000, 20_000] {
        let (samples, maps) = tab3_windows(n);
        let blocks = featurize_windows(&samples, &maps).unwrap();
        let domain = blocks.history.khatri_rao(&blocks.action_block).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &domain, |b, x| b.iter(|| covariance(x, x).unwrap()));
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_forward");
    for n in [5_000, 20_000] {
        let (samples, maps) = tab3_windows(n);
        let blocks = featurize_windows(&samples, &maps).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &blocks, |b, blocks| b.iter(|| fit_forward(blocks, RIDGE, CAP).unwrap()));
    }
    group.finish();
}

fn bundle(c: &mut Criterion) {
    let (samples, maps) = tab3_windows(10_000);
    let blocks = featurize_windows(&samples, &maps).unwrap();
    let mut group = c.benchmark_group("bundle");
    group.sample_size(10);
    group.bench_function("fit_bundle_10k", |b| b.iter(|| fit_bundle(&blocks, &maps, RIDGE, CAP, 1).unwrap()));
    group.bench_function("fit_links_10k", |b| b.iter(|| fit_links(&samples, &maps, RIDGE).unwrap()));
    group.finish();
}

criterion_group!(benches, featurize, gram, forward, bundle);
criterion_main!(benches);
