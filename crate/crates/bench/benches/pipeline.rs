use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use promptsearch_core::dataset::{build_ngram_index, contamination_filter};
use promptsearch_core::gps::mock::{AppendMutator, LengthScorer};
use promptsearch_core::gps::{run_gps, GpsConfig};
use promptsearch_core::metrics::{auc, PredictionRecord};
use promptsearch_core::registry::{Gold, LabeledExample};
use promptsearch_core::rng::stream;
use promptsearch_core::text::TokenUnit;

fn ranked(n: usize) -> Vec<PredictionRecord> {
    let mut rng = stream(1, &[]);
    (0..n)
        .map(|_| PredictionRecord::ranked(rng.random(), if rng.random_bool(0.5) { "pos" } else { "neg" }))
        .collect()
}

fn corpus(prefix: &str, docs: usize, len: usize, seed: u64) -> Vec<LabeledExample> {
    let mut rng = stream(seed, &[]);
    (0..docs)
        .map(|i| {
            let text: String = (0..len)
                .map(|_| char::from_u32(0x4e00 + rng.random_range(0..64)).unwrap())
                .collect();
            LabeledExample::new(format!("{prefix}{i}"), vec![text], Gold::Label("x".into()))
        })
        .collect()
}

fn bench_auc(c: &mut Criterion) {
    let mut group = c.benchmark_group("auc");
    for n in [1_000, 10_000] {
        let records = ranked(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &records, |b, r| {
            b.iter(|| auc(black_box(r), "pos"))
        });
    }
    group.finish();
}

fn bench_filter(c: &mut Criterion) {
    let test = corpus("te", 500, 200, 2);
    let train = corpus("tr", 2_000, 200, 3);
    c.bench_function("ngram_index/500x200", |b| {
        b.iter(|| build_ngram_index(black_box(&test), 30, TokenUnit::Char))
    });
    let index = build_ngram_index(&test, 30, TokenUnit::Char).unwrap();
    c.bench_function("contamination_filter/2000x200", |b| {
        b.iter(|| contamination_filter(black_box(&train), &index))
    });
}

fn bench_gps(c: &mut Criterion) {
    let dev = vec![LabeledExample::new("d", vec!["x".into()], Gold::Label("a".into()))];
    let initial: Vec<String> = (0..16).map(|i| format!("p{i}")).collect();
    let mutator = AppendMutator::new(["a", "b", "c"]);
    let cfg = GpsConfig {
        iterations: 5,
        top_k: 8,
        offspring_per_parent: 4,
        rng_seed: 0,
        dedup: true,
    };
    c.bench_function("gps/T5_K8", |b| {
        b.iter(|| run_gps(black_box(&initial), &dev, &LengthScorer, &mutator, &cfg))
    });
}

criterion_group!(benches, bench_auc, bench_filter, bench_gps);
criterion_main!(benches);
