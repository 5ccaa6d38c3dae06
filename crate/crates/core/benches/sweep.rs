use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use saber_sim::domain::{SchedulerConfig, WorkloadMix};
use saber_sim::estimator::SpeedModel;
use saber_sim::sweep::{sweep, Execution, SchedulerVariant, SweepGrid};
use saber_sim::{SimConfig, WorkloadSpec};

fn grid() -> SweepGrid {
    let mut variants: Vec<_> = [10, 40, 70, 100].into_iter().map(|cap| SchedulerVariant::Static { cap }).collect();
    variants.push(SchedulerVariant::Saber { label: "saber".into(), model: SpeedModel::default_ground_truth() });
    SweepGrid { mixes: vec![WorkloadMix::w1(), WorkloadMix::w3()], rps: vec![2.0, 8.0, 20.0], variants }
}

fn base() -> SimConfig {
    let mut c = SimConfig::new(
        WorkloadSpec::new(WorkloadMix::w1(), 1.0, 100, 1),
        SchedulerConfig::saber(),
        Some(SpeedModel::default_ground_truth()),
    );
    c.repeats = 2;
    c
}

fn bench_sweep(c: &mut Criterion) {
    let grid = grid();
    let base = base();
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    for (name, execution) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &execution, |b, &execution| {
            b.iter(|| sweep(&grid, &base, execution).expect("sweep runs"))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sweep);
criterion_main!(benches);
