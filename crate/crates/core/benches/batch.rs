//! Sequential vs. data-parallel execution of the per-task work that
//! dominates training and evaluation.
//!
//! With `--no-default-features` both variants run sequentially, which
//! gives the overhead of the dispatch itself.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use skorder::encoder::{EncoderConfig, EncoderParams};
use skorder::metrics::evaluate;
use skorder::par::Exec;
use skorder::rng::SplitMix64;
use skorder::taskgen::{sample_task_shaped, TaskConfig};
use skorder::trainer::task_loss_and_grad;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn batch_gradients(c: &mut Criterion) {
    let cfg = TaskConfig::desk();
    let params = EncoderParams::init(&EncoderConfig::default(), &mut SplitMix64::new(1)).unwrap();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (n, p) in [(100, 3), (200, 6)] {
        let tasks: Vec<_> = (0..16)
            .map(|i| sample_task_shaped(&cfg, i, Some((n, p))).unwrap())
            .collect();
        group.throughput(Throughput::Elements(tasks.len() as u64));
        for (name, exec) in MODES {
            group.bench_with_input(
                BenchmarkId::new(name, format!("n{n}_p{p}")),
                &tasks,
                |b, tasks| {
                    b.iter(|| {
                        exec.map(tasks, |t| {
                            task_loss_and_grad(&params, &t.x, &t.gstar).unwrap().0
                        })
                    })
                },
            );
        }
    }
    group.finish();
}

fn task_generation(c: &mut Criterion) {
    let cfg = TaskConfig::default();
    let mut group = c.benchmark_group("task_generation");
    group.sample_size(10);
    group.throughput(Throughput::Elements(32));
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                exec.map_range(0..32, |i| {
                    sample_task_shaped(&cfg, i as u64, Some((500, 20))).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let cfg = TaskConfig::desk();
    let params = EncoderParams::init(&EncoderConfig::default(), &mut SplitMix64::new(2)).unwrap();
    let tasks: Vec<_> = (0..32)
        .map(|i| sample_task_shaped(&cfg, i, None).unwrap())
        .collect();
    let mut group = c.benchmark_group("evaluation");
    group.sample_size(10);
    group.throughput(Throughput::Elements(tasks.len() as u64));
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| evaluate(&params, &tasks, exec).unwrap().1)
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, task_generation, evaluation);
criterion_main!(benches);
