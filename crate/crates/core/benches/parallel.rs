// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sequential versus data-parallel execution of the two batch-level hot
//! paths: one training step and the per-layer diagnostics table.
//! Set `PRELAB_THREADS` to cap the worker count.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use prelab::diagnostics::layer_report;
use prelab::io::{split_features, RunConfig};
use prelab::model::{Mllm, Sample, Trainer};
use prelab::par::{init_threads_from_env, Exec};
use prelab::synth::{generate_dataset, ImageSpec};

fn modes() -> [(&'static str, Exec); 2] {
    [
        ("sequential", Exec::Sequential),
        ("parallel", Exec::Parallel),
    ]
}

fn train_step(c: &mut Criterion) {
    init_threads_from_env().expect("PRELAB_THREADS");
    let ds = generate_dataset(200, 0, &ImageSpec::default(), Exec::Parallel).unwrap();
    let cfg = RunConfig::default();
    let batch: Vec<Sample<'_>> = ds.train[..cfg.batch_size].iter().map(Into::into).collect();
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut t = Trainer::new(
                Mllm::new(cfg.model.clone()).unwrap(),
                cfg.train_config(),
                exec,
            );
            b.iter(|| black_box(t.step(&batch).unwrap()));
        });
    }
    g.finish();
}

fn diagnostics(c: &mut Criterion) {
    let ds = generate_dataset(1000, 1, &ImageSpec::default(), Exec::Parallel).unwrap();
    let model = Mllm::new(RunConfig::default().model).unwrap();
    let train = split_features(&model, &ds.probe_train, Exec::Parallel).unwrap();
    let test = split_features(&model, &ds.probe_test, Exec::Parallel).unwrap();
    let mut g = c.benchmark_group("layer_report");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(layer_report(&train, &test, exec).unwrap()));
        });
    }
    g.finish();
}

criterion_group!(benches, train_step, diagnostics);
criterion_main!(benches);
