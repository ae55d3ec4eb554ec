//! Rayon fan-out versus the sequential loop used without the `parallel`
//! feature, on the two hot paths: per-example gradients and condition
//! encoding.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use layerforge_core::codec::build_condition_sequence;
use layerforge_core::parallel::par_map;
use layerforge_core::synth::{gen_dataset, sample_example, SamplingConfig, SceneConfig};
use layerforge_core::train::{example_loss_and_grads, RunConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn batch_gradients(c: &mut Criterion) {
    let run = RunConfig::default();
    let trainer = Trainer::new(run).expect("default config is valid");
    let batch = trainer.prepare_batch(0).expect("batch");
    let phase = trainer.phase();
    let model = &trainer.model;
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("sequential", batch.len()), |b| {
        b.iter(|| batch.iter().map(|ex| example_loss_and_grads(model, phase, ex).unwrap().0).sum::<f64>())
    });
    group.bench_function(BenchmarkId::new("parallel", batch.len()), |b| {
        b.iter(|| par_map(&batch, |ex| example_loss_and_grads(model, phase, ex).unwrap().0).iter().sum::<f64>())
    });
    group.finish();
}

fn condition_encoding(c: &mut Criterion) {
    let scenes = gen_dataset(0, 16, &SceneConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let canvases: Vec<_> = scenes
        .iter()
        .map(|s| sample_example(s, &SamplingConfig::default(), &mut rng).unwrap().canvas)
        .collect();
    let mut group = c.benchmark_group("condition_encoding");
    group.bench_function(BenchmarkId::new("sequential", canvases.len()), |b| {
        b.iter(|| canvases.iter().map(|cv| build_condition_sequence(cv, 4).unwrap().len()).sum::<usize>())
    });
    group.bench_function(BenchmarkId::new("parallel", canvases.len()), |b| {
        b.iter(|| par_map(&canvases, |cv| build_condition_sequence(cv, 4).unwrap().len()).iter().sum::<usize>())
    });
    group.finish();
}

criterion_group!(benches, batch_gradients, condition_encoding);
criterion_main!(benches);
