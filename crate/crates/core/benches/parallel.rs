//! Sequential against parallel execution of the batch routines.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fraudsys::classifier::{cross_validate, train};
use fraudsys::graph::FeatureConfig;
use fraudsys::puzzle::{solve_puzzle_with, Difficulty, SolveOptions};
use fraudsys::sim::{generate_synthetic, labeled_examples, replay, LoadedLog, SimConfig};
use fraudsys::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve_puzzle");
    let d = Difficulty::from_u64(50_000).unwrap();
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut seed = 0;
            b.iter(|| {
                seed += 1;
                let opts = SolveOptions {
                    exec,
                    seed: Some(seed),
                    deadline: None,
                };
                solve_puzzle_with(&[5; 32], &d, 4, opts)
            })
        });
    }
    g.finish();
}

fn classify(c: &mut Criterion) {
    let rows = generate_synthetic(5, 20, 50, 500, 1);
    let examples = labeled_examples(&rows, &FeatureConfig::default());
    let model = train(&examples, 5).unwrap();
    let queries: Vec<Vec<f64>> = examples.iter().map(|e| e.features.clone()).collect();

    let mut g = c.benchmark_group("score_many");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| model.score_many(&queries, exec)));
    }
    g.finish();

    let mut g = c.benchmark_group("cross_validate");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| cross_validate(&examples, 10, 5, 0, exec).unwrap())
        });
    }
    g.finish();
}

fn replay_folds(c: &mut Criterion) {
    let log = LoadedLog {
        rows: generate_synthetic(4, 10, 30, 200, 2),
        skipped: 0,
    };
    let mut g = c.benchmark_group("replay");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = SimConfig {
            exec,
            ..SimConfig::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| replay(&log, &cfg).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, solve, classify, replay_folds);
criterion_main!(benches);
