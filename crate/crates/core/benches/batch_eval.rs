use cellvta::data::synth::{class_names, generate_in_memory, SynthConfig};
use cellvta::exec::Execution;
use cellvta::harness::{evaluate_samples, ideal_results};
use cellvta::postprocess::PostprocessConfig;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench(c: &mut Criterion) {
    let cfg = SynthConfig::toy(32, 5);
    let pp = PostprocessConfig::toy();
    let names = class_names(cfg.num_classes);
    let (samples, _) = generate_in_memory(&cfg, Execution::Sequential).unwrap();
    let preds = ideal_results(&samples, cfg.num_classes, &pp, Execution::Sequential).unwrap();

    let mut g = c.benchmark_group("synth_32");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| generate_in_memory(&cfg, exec).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("postprocess_32");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| ideal_results(&samples, cfg.num_classes, &pp, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate_32");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_samples(&samples, &preds, &names, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench
}
criterion_main!(benches);
