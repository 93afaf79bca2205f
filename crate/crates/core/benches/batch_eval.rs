//! Batch gradient evaluation: rayon data-parallel path versus the
//! sequential fallback. Both produce identical gradients.

use criterion::{criterion_group, criterion_main, Criterion};
use sleep_events::codec::Assembly;
use sleep_events::dataset::{build_examples, DatasetConfig, Example};
use sleep_events::model::{init_params, ModelConfig};
use sleep_events::par;
use sleep_events::synth::{generate_record, montage, SynthConfig};
use sleep_events::trainer::{batch_gradient, evaluate, LossMode};

fn examples(n: usize) -> Vec<Example> {
    let (record, _) = generate_record(&SynthConfig::new(2, n as f64 * 30.0, 4)).unwrap();
    let cfg = DatasetConfig::new(Assembly::SAR, montage(4));
    build_examples(&record, &cfg).unwrap().examples
}

fn bench(c: &mut Criterion) {
    let ex = examples(8);
    let batch: Vec<&Example> = ex.iter().collect();
    let seeds: Vec<u64> = (0..batch.len() as u64).collect();
    let params = init_params::<f32>(&ModelConfig::new(4, Assembly::SAR), 0).unwrap();

    let mut g = c.benchmark_group("batch_gradient_8");
    g.sample_size(10);
    for (name, sequential) in [("parallel", false), ("sequential", true)] {
        g.bench_function(name, |b| {
            par::set_sequential(sequential);
            b.iter(|| batch_gradient(&params, &batch, LossMode::Multi, &seeds).unwrap());
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate_8");
    g.sample_size(10);
    for (name, sequential) in [("parallel", false), ("sequential", true)] {
        g.bench_function(name, |b| {
            par::set_sequential(sequential);
            b.iter(|| evaluate(&params, &batch, LossMode::Multi).unwrap());
        });
    }
    g.finish();
    par::set_sequential(false);
}

criterion_group!(benches, bench);
criterion_main!(benches);
