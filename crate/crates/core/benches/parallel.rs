//! Sequential versus rayon execution of the per-scene hot paths.
//!
//! Build with `--no-default-features` to see the sequential fallback: both
//! arms then run the same code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deconfound::analysis::{all_taps, capture_means};
use deconfound::evalkit::{build_pope_probes, pope_accuracy, PopeRegime};
use deconfound::model::{Modality, ModelBundle, ModelConfig};
use deconfound::par::Exec;
use deconfound::world::{build_world, cooccurrence_counts, WorldConfig};

fn bench(c: &mut Criterion) {
    let w = build_world(&WorldConfig::default()).unwrap();
    let bundle = ModelBundle::init(&ModelConfig::default(), &w, 0).unwrap();
    let scenes = w.sample_scenes(200, 1);
    let cooc = cooccurrence_counts(w.k(), &w.sample_scenes(1000, 2)).unwrap();
    let probes = build_pope_probes(&scenes, &cooc, PopeRegime::Adv, 2, 0).unwrap();
    let taps = all_taps(bundle.config().n_layers);

    let mut g = c.benchmark_group("exec");
    g.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        g.bench_with_input(BenchmarkId::new("pope_accuracy", name), &exec, |b, &e| {
            b.iter(|| pope_accuracy(&bundle, &scenes, &probes, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("capture_means", name), &exec, |b, &e| {
            b.iter(|| capture_means(&bundle, &scenes, &taps, Modality::Visual, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
