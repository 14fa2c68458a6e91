use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slim_core::dataset::make_folds;
use slim_core::embedding::{cooccurrence_loss, EmbeddingMatrix};
use slim_core::landmarks::cluster_loss;
use slim_core::model::{
    inspect_graph, joint_loss, prepare_dataset, target_for, BatchItem, ModelState, OptimizerKind,
    PreparedGraph,
};
use slim_core::pooling::FeatureSet;
use slim_core::train::{accuracy, cross_validate, train, Split};
use slim_core::{DatasetBundle, Execution, Graph, TrainConfig};

/// Class 0: sparse graphs of type-0 nodes. Class 1: dense graphs of type-1 nodes.
fn separable(count: usize, seed: u64) -> DatasetBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs = (0..count)
        .map(|i| {
            let class = i % 2;
            let n = rng.gen_range(4..9);
            let p = if class == 0 { 0.2 } else { 0.8 };
            let edges: Vec<_> = Graph::random(&mut rng, n, p, 1, class).edges().collect();
            Graph::new(n, &edges, vec![class; n], class).unwrap()
        })
        .collect();
    DatasetBundle::from_graphs("SEP", graphs)
}

fn small_config() -> TrainConfig {
    TrainConfig {
        landmarks: 3,
        latent: 4,
        classifier_hidden: 8,
        epochs: 20,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

fn prepared(b: &DatasetBundle, cfg: &TrainConfig) -> Vec<PreparedGraph> {
    prepare_dataset(b, &cfg.substructure, Execution::Sequential).unwrap()
}

fn all_train(n: usize) -> Split {
    Split {
        train: (0..n).collect(),
        ..Split::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let b = separable(8, 1);
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adagrad] {
        let mut cfg = TrainConfig {
            learning_rate: 0.0,
            optimizer,
            epochs: 1,
            ..small_config()
        };
        let graphs = prepared(&b, &cfg);
        let one = train(&graphs, &all_train(8), &cfg, 2, 2, None).unwrap();
        cfg.epochs = 6;
        let six = train(&graphs, &all_train(8), &cfg, 2, 2, None).unwrap();
        assert_eq!(one.state.params, six.state.params, "{optimizer:?}");
    }
}

#[test]
fn separable_toy_set_is_learned() {
    let b = separable(12, 2);
    let cfg = TrainConfig {
        epochs: 50,
        ..small_config()
    };
    let graphs = prepared(&b, &cfg);
    let out = train(&graphs, &all_train(12), &cfg, 2, 2, None).unwrap();
    let acc = accuracy(&out.state, &graphs, &(0..12).collect::<Vec<_>>()).unwrap();
    assert_eq!(acc, 1.0);
    let first = out.metrics.first().unwrap().train_loss;
    let last = out.metrics.last().unwrap().train_loss;
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let b = separable(10, 3);
    let cfg = small_config();
    let graphs = prepared(&b, &cfg);
    let split = Split {
        train: (0..7).collect(),
        unlabeled: vec![],
        validation: (7..10).collect(),
    };
    let a = train(&graphs, &split, &cfg, 2, 2, Some(0)).unwrap();
    let c = train(&graphs, &split, &cfg, 2, 2, Some(0)).unwrap();
    assert_eq!(a.metrics, c.metrics);
    assert_eq!(a.state.params, c.state.params);
    let other = train(
        &graphs,
        &split,
        &TrainConfig { seed: 9, ..cfg },
        2,
        2,
        Some(0),
    )
    .unwrap();
    assert_ne!(a.state.params, other.state.params);
}

#[test]
fn cross_validation_selects_the_same_epoch_twice() {
    let b = separable(20, 4);
    let cfg = TrainConfig {
        epochs: 8,
        ..small_config()
    };
    let graphs = prepared(&b, &cfg);
    let plan = make_folds(&b, 4, 0).unwrap();
    let x = cross_validate(&graphs, &cfg, &plan, 2, 2).unwrap();
    let y = cross_validate(&graphs, &cfg, &plan, 2, 2).unwrap();
    assert_eq!(x.result, y.result);
    let curve = &x.result.curve;
    let best = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(curve[x.result.selected_epoch - 1], best);
    assert_eq!(x.result.per_fold.len(), 4);
}

#[test]
fn unlabeled_graphs_never_leak_their_labels() {
    let b = separable(12, 5);
    let cfg = TrainConfig {
        semi_supervised: true,
        ..small_config()
    };
    let graphs = prepared(&b, &cfg);
    let split = Split {
        train: (0..8).collect(),
        unlabeled: (8..12).collect(),
        validation: vec![],
    };
    let clean = train(&graphs, &split, &cfg, 2, 2, Some(1)).unwrap();
    let mut corrupted = graphs.clone();
    for g in &mut corrupted[8..] {
        g.label = 1 - g.label;
    }
    let dirty = train(&corrupted, &split, &cfg, 2, 2, Some(1)).unwrap();
    assert_eq!(clean.metrics, dirty.metrics);
    assert_eq!(clean.state.params, dirty.state.params);
}

#[test]
fn sequential_and_parallel_runs_agree_bitwise() {
    let b = separable(16, 6);
    let seq = TrainConfig {
        execution: Execution::Sequential,
        epochs: 6,
        ..small_config()
    };
    let par = TrainConfig {
        execution: Execution::Parallel,
        ..seq.clone()
    };
    let graphs = prepared(&b, &seq);
    let a = train(&graphs, &all_train(16), &seq, 2, 2, None).unwrap();
    let c = train(&graphs, &all_train(16), &par, 2, 2, None).unwrap();
    assert_eq!(a.metrics, c.metrics);
    assert_eq!(a.state.params, c.state.params);
}

fn log_softmax_at(logits: &Array2<f64>, class: usize) -> f64 {
    let row = logits.row(0);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[class] - lse
}

#[test]
fn joint_loss_matches_a_direct_evaluation() {
    let b = separable(6, 7);
    let cfg = TrainConfig {
        lambda_embed: 0.3,
        lambda_cluster: 0.2,
        ..small_config()
    };
    let graphs = prepared(&b, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut state = ModelState::new(&mut rng, &cfg, 2, 2);
    state.params.landmarks.u = Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.0..1.0));
    let labels = [Some(0), Some(1), None, Some(1), None, Some(0)];
    let targets: Vec<_> = graphs
        .iter()
        .map(|g| target_for(&state.params, &cfg, g).unwrap())
        .collect();
    let batch: Vec<BatchItem<'_>> = (0..6)
        .map(|i| BatchItem {
            graph: &graphs[i],
            label: labels[i],
            target: &targets[i],
            id: i,
        })
        .collect();
    let loss = joint_loss(&state.params, &cfg, &batch).unwrap();

    let (mut ce, mut co, mut cl, mut labeled) = (0.0, 0.0, 0.0, 0);
    for i in 0..6 {
        let view = inspect_graph(&state.params, &cfg, &graphs[i]).unwrap();
        if let Some(y) = labels[i] {
            ce -= log_softmax_at(&view.logits, y);
            labeled += 1;
        }
        let h = EmbeddingMatrix {
            values: view.embedding.clone(),
        };
        co += cooccurrence_loss(&h, &b.graphs[i]).unwrap();
        cl += cluster_loss(&view.assignment, &targets[i]).unwrap();
    }
    let expected = ce / labeled as f64 + 0.3 * co + 0.2 * cl;
    assert!(
        (loss.total - expected).abs() < 1e-10,
        "{} vs {expected}",
        loss.total
    );
    assert_eq!(loss.labeled, 4);

    let plain = TrainConfig {
        lambda_embed: 0.0,
        lambda_cluster: 0.0,
        ..cfg
    };
    let only_ce = joint_loss(&state.params, &plain, &batch).unwrap();
    assert!((only_ce.total - ce / labeled as f64).abs() < 1e-10);
}

#[test]
fn confident_correct_classifier_has_near_zero_loss_on_single_nodes() {
    let graphs: Vec<Graph> = (0..4)
        .map(|i| Graph::new(1, &[], vec![i % 2], i % 2).unwrap())
        .collect();
    let b = DatasetBundle::from_graphs("DOTS", graphs);
    let cfg = TrainConfig {
        lambda_embed: 0.0,
        lambda_cluster: 0.0,
        landmarks: 1,
        features: FeatureSet::InteractionDensityMeans,
        ..small_config()
    };
    let prepped = prepared(&b, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut state = ModelState::new(&mut rng, &cfg, 2, 2);
    // with one landmark the features are [C̃, p, M] and M is the node's one-hot type
    let c = &mut state.params.classifier;
    c.w_hidden.fill(0.0);
    c.b_hidden.fill(0.0);
    c.w_out.fill(0.0);
    c.b_out.fill(0.0);
    c.w_hidden[[2, 0]] = 5.0;
    c.w_hidden[[3, 0]] = -5.0;
    c.w_out[[0, 0]] = 40.0;
    c.w_out[[0, 1]] = -40.0;
    let targets: Vec<_> = prepped
        .iter()
        .map(|g| target_for(&state.params, &cfg, g).unwrap())
        .collect();
    let batch: Vec<BatchItem<'_>> = prepped
        .iter()
        .zip(&targets)
        .enumerate()
        .map(|(i, (g, t))| BatchItem {
            graph: g,
            label: Some(g.label),
            target: t,
            id: i,
        })
        .collect();
    let loss = joint_loss(&state.params, &cfg, &batch).unwrap();
    assert!(loss.total < 1e-6, "loss {}", loss.total);
    assert_eq!(loss.correct, 4);
}

#[test]
fn constant_classifier_scores_half_on_balanced_data() {
    let b = separable(10, 8);
    let cfg = small_config();
    let graphs = prepared(&b, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut state = ModelState::new(&mut rng, &cfg, 2, 2);
    state.params.classifier.w_out.fill(0.0);
    state.params.classifier.b_out[[0, 0]] = 1.0;
    state.params.classifier.b_out[[0, 1]] = 0.0;
    let acc = accuracy(&state, &graphs, &(0..10).collect::<Vec<_>>()).unwrap();
    assert_eq!(acc, 0.5);
}
