use std::path::PathBuf;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slim_core::coherence::{empirical_coherence_sweep, MixtureSpec};
use slim_core::landmarks::TargetMatrix;
use slim_core::model::{
    joint_loss_and_gradients, prepare_dataset, target_for, BatchItem, ModelState, PreparedGraph,
};
use slim_core::train::{train, Split};
use slim_core::{load_tu_dataset, DatasetBundle, Execution, TrainConfig};

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn mutag() -> DatasetBundle {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    load_tu_dataset(root, "MUTAG").expect("MUTAG under data/")
}

fn config(exec: Execution) -> TrainConfig {
    TrainConfig {
        execution: exec,
        epochs: 1,
        ..TrainConfig::default()
    }
}

fn substructures(c: &mut Criterion) {
    let bundle = mutag();
    let mut group = c.benchmark_group("prepare_dataset");
    for exec in MODES {
        let cfg = config(exec);
        group.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |b| {
            b.iter(|| prepare_dataset(&bundle, &cfg.substructure, exec).unwrap())
        });
    }
    group.finish();
}

fn batch_gradients(c: &mut Criterion) {
    let bundle = mutag();
    let cfg = config(Execution::Sequential);
    let graphs: Vec<PreparedGraph> =
        prepare_dataset(&bundle, &cfg.substructure, Execution::Sequential).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let state = ModelState::new(&mut rng, &cfg, bundle.node_label_count, bundle.class_count);
    let targets: Vec<TargetMatrix> = graphs[..32]
        .iter()
        .map(|g| target_for(&state.params, &cfg, g).unwrap())
        .collect();
    let batch: Vec<BatchItem<'_>> = graphs[..32]
        .iter()
        .zip(&targets)
        .enumerate()
        .map(|(id, (graph, target))| BatchItem {
            graph,
            label: Some(graph.label),
            target,
            id,
        })
        .collect();
    let mut group = c.benchmark_group("joint_loss_and_gradients");
    for exec in MODES {
        let cfg = config(exec);
        group.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |b| {
            b.iter(|| joint_loss_and_gradients(&state.params, &cfg, &batch, true).unwrap())
        });
    }
    group.finish();
}

fn one_epoch(c: &mut Criterion) {
    let bundle = mutag();
    let graphs = prepare_dataset(
        &bundle,
        &config(Execution::Sequential).substructure,
        Execution::Sequential,
    )
    .unwrap();
    let split = Split {
        train: (0..graphs.len()).collect(),
        ..Split::default()
    };
    let mut group = c.benchmark_group("train_one_epoch");
    group.sample_size(10);
    for exec in MODES {
        let cfg = config(exec);
        group.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |b| {
            b.iter(|| {
                train(
                    &graphs,
                    &split,
                    &cfg,
                    bundle.node_label_count,
                    bundle.class_count,
                    None,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn coherence_sweep(c: &mut Criterion) {
    let spec = MixtureSpec {
        points: 500,
        ..MixtureSpec::default()
    };
    let ks = [2, 8, 32];
    let seeds: Vec<u64> = (0..4).collect();
    let mut group = c.benchmark_group("coherence_sweep");
    group.sample_size(10);
    for exec in MODES {
        group.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |b| {
            b.iter(|| empirical_coherence_sweep(&spec, &ks, &seeds, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    substructures,
    batch_gradients,
    one_epoch,
    coherence_sweep
);
criterion_main!(benches);
