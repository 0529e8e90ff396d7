use cdpb_core::config::SystemConfig;
use cdpb_core::engine::{self, StrategySpec, TrainSpec};
use cdpb_core::experiment;
use cdpb_core::par;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn seeds_training(c: &mut Criterion) {
    let res = SystemConfig::default().resolve().unwrap();
    let plan = experiment::plan_run(&res, StrategySpec::Noisy).unwrap();
    let run = |seed: usize| {
        let spec = TrainSpec { strategy: plan.strategy, rho: plan.rho, tau: plan.tau, seed: seed as u64 };
        engine::run_training(&res.task, &res.channel, &res.learning, &res.engine, &spec).unwrap()
    };

    let mut g = c.benchmark_group("train_seeds");
    g.sample_size(10);
    for n in [4usize, 16] {
        g.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| b.iter(|| par::map_range(n, run)));
        g.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
            b.iter(|| par::sequential_map_range(n, run))
        });
    }
    g.finish();
}

criterion_group!(benches, seeds_training);
criterion_main!(benches);
