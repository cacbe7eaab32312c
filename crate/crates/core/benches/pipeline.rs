//! Pooling, prefill and sweep throughput on one thread versus the full rayon
//! pool. Build with `--no-default-features` to time the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use metok_core::io::{gen_synthetic, EventProfile, RunConfig};
use metok_core::model::{ModelConfig, ToyModel};
use metok_core::pipeline::{run_once, sweep_points, SimulateOptions, SweepAxis};
use metok_core::schedule::PruneSchedule;
use metok_core::vision::run_vision_stage;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let all = rayon::current_num_threads();
    let mut sizes = vec![1];
    if all > 1 {
        sizes.push(all);
    }
    sizes
        .into_iter()
        .map(|n| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            (format!("threads={n}"), pool)
        })
        .collect()
}

fn bench_vision(c: &mut Criterion) {
    let syn = gen_synthetic(64, 24, 24, 16, 1, EventProfile::new(8)).unwrap();
    let cfg = RunConfig {
        k: 8,
        ..RunConfig::default()
    };
    let mut group = c.benchmark_group("vision_stage");
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&label), |b| {
            pool.install(|| b.iter(|| run_vision_stage(&syn.frames, &syn.text, &cfg).unwrap()))
        });
    }
    group.finish();
}

fn bench_prefill(c: &mut Criterion) {
    let syn = gen_synthetic(32, 4, 4, 16, 2, EventProfile::new(4)).unwrap();
    let cfg = RunConfig {
        k: 4,
        ..RunConfig::default()
    };
    let (stream, _) = run_vision_stage(&syn.frames, &syn.text, &cfg).unwrap();
    let model = ToyModel::new(ModelConfig::from_run(&cfg, 16)).unwrap();
    let input = model.build_input(&stream, &syn.text).unwrap();
    let sched = PruneSchedule::from_config(&cfg).unwrap();
    let mut group = c.benchmark_group("prefill");
    group.sample_size(20);
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&label), |b| {
            pool.install(|| b.iter(|| model.prefill(&input, &sched).unwrap()))
        });
    }
    group.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let syn = gen_synthetic(16, 4, 4, 8, 3, EventProfile::new(3)).unwrap();
    let base = RunConfig {
        k: 3,
        layers: 6,
        d_model: 32,
        ..RunConfig::default()
    };
    let axes: Vec<SweepAxis> = vec!["r=0.3,0.55,0.7,0.9".parse().unwrap()];
    let points = sweep_points(&base, &axes).unwrap();
    let opts = SimulateOptions {
        steps: 4,
        ..SimulateOptions::default()
    };
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&label), |b| {
            pool.install(|| {
                b.iter(|| metok_core::par::map(&points, |p| run_once(&syn.frames, &syn.text, p, &opts).unwrap().trace))
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_vision, bench_prefill, bench_sweep);
criterion_main!(benches);
