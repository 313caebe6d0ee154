//! Sequential vs rayon execution of the data-parallel stages.
//!
//! Build with `--no-default-features` to see the fallback: both variants then
//! take the sequential path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use landcover::classify::{self, ClassifyOptions, ForestParams, TrainingSet};
use landcover::features::FeatureRecipe;
use landcover::fusion;
use landcover::metrics;
use landcover::probmap::ProbabilityMap;
use landcover::segment;
use landcover::synthgen::{self, SceneSpec};
use landcover::Execution;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn scene(size: usize) -> SceneSpec {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenes/reference.json");
    let mut spec = SceneSpec::load(path).unwrap();
    spec.width = size;
    spec.height = size;
    spec
}

fn bench_synthgen(c: &mut Criterion) {
    let spec = scene(256);
    let mut g = c.benchmark_group("synthgen_256");
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| synthgen::generate(black_box(&spec), exec).unwrap())
        });
    }
    g.finish();
}

fn training_set(n: usize, d: usize) -> TrainingSet {
    let labels: Vec<u8> = (0..n).map(|i| (i % 5) as u8 + 1).collect();
    let features = (0..n * d)
        .map(|i| {
            ((i * 2654435761) % 1000) as f64 / 1000.0
                + (labels[i / d] as f64) * ((i % d) % 2) as f64
        })
        .collect();
    TrainingSet::new(d, 5, features, labels).unwrap()
}

fn bench_train(c: &mut Criterion) {
    let ts = training_set(1000, 40);
    let params = ForestParams {
        n_trees: 32,
        ..ForestParams::default()
    };
    let mut g = c.benchmark_group("train_forest");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| classify::train_forest(black_box(&ts), &params, 7, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_classify(c: &mut Criterion) {
    let (r, _) = synthgen::generate(&scene(256), Execution::Sequential).unwrap();
    let recipe = FeatureRecipe::default().with_patch_size(32);
    let dims = recipe.extract(&r).unwrap().len();
    let params = ForestParams {
        n_trees: 16,
        ..ForestParams::default()
    };
    let model = classify::train_forest(&training_set(500, dims), &params, 7, Execution::Sequential)
        .unwrap();
    let mut g = c.benchmark_group("classify_raster_256");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = ClassifyOptions::new(vec![32, 64]).with_execution(exec);
        g.bench_function(name, |b| {
            b.iter(|| classify::classify_raster(black_box(&r), &model, &recipe, &opts).unwrap())
        });
    }
    g.finish();
}

fn bench_vote_and_metrics(c: &mut Criterion) {
    let (r, truth) = synthgen::generate(&scene(512), Execution::Sequential).unwrap();
    let part = segment::initial_segmentation(&r, 100.0, 0.8, 64).unwrap();
    let pm = ProbabilityMap::one_hot(&truth).unwrap();
    let mut g = c.benchmark_group("region_vote_512");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| fusion::vote_with(black_box(&part), &pm, e).unwrap())
        });
    }
    g.finish();
    let mut g = c.benchmark_group("confusion_512");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| metrics::confusion_with(black_box(&truth), &truth, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(
    benches,
    bench_synthgen,
    bench_train,
    bench_classify,
    bench_vote_and_metrics
);
criterion_main!(benches);
