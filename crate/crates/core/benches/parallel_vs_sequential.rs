use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use hwn::calibration::{run_study_with_info, study_information, study_truth, StudyConfig};
use hwn::fisher::mc_fisher_information;
use hwn::Execution;

fn config(threads: usize) -> StudyConfig {
    StudyConfig {
        fisher_draws: 4000,
        threads,
        record_timing: false,
        ..StudyConfig::new(2, 300, 32, 7)
    }
}

fn replications(c: &mut Criterion) {
    let base = config(0);
    let (truth, chart) = study_truth(&base).unwrap();
    let info = study_information(&base, &chart).unwrap();
    let mut group = c.benchmark_group("replications");
    group.sample_size(10);
    for (name, threads) in [("sequential", 1usize), ("parallel", 0)] {
        let cfg = config(threads);
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| run_study_with_info(cfg, &truth, &info).unwrap())
        });
    }
    group.finish();
}

fn fisher(c: &mut Criterion) {
    let cfg = StudyConfig::new(5, 100, 1, 7);
    let (_, chart) = study_truth(&cfg).unwrap();
    let mut group = c.benchmark_group("fisher_d5");
    group.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| mc_fisher_information(&chart, 8000, 1, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, replications, fisher);
criterion_main!(benches);
