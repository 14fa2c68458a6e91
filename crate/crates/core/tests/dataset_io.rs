use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slim_core::dataset::{make_folds, write_tu_dataset};
use slim_core::{load_tu_dataset, DatasetBundle, Graph, SlimError};

fn data_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

#[test]
fn mutag_has_the_published_shape() {
    let b = load_tu_dataset(data_root(), "MUTAG").unwrap();
    assert_eq!(b.len(), 188);
    assert_eq!(b.class_count, 2);
    assert_eq!(b.node_label_count, 7);
    let positives = b.graphs.iter().filter(|g| g.class_label() == 1).count();
    assert_eq!(positives, 125);
    assert!(b
        .graphs
        .iter()
        .all(|g| g.node_count() >= 10 && g.node_count() <= 28));
}

#[test]
fn mutag_folds_are_balanced() {
    let b = load_tu_dataset(data_root(), "MUTAG").unwrap();
    let plan = make_folds(&b, 10, 0).unwrap();
    let mut sizes = plan.fold_sizes();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![18, 18, 19, 19, 19, 19, 19, 19, 19, 19]);
    for f in 0..10 {
        let held = plan.fold_members(f);
        let positives = held
            .iter()
            .filter(|&&i| b.graphs[i].class_label() == 1)
            .count();
        assert!(
            (12..=13).contains(&positives),
            "fold {f} holds {positives} positives"
        );
    }
}

#[test]
fn mutag_round_trips_through_the_writer() {
    let b = load_tu_dataset(data_root(), "MUTAG").unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_tu_dataset(&b, dir.path()).unwrap();
    let again = load_tu_dataset(dir.path(), "MUTAG").unwrap();
    assert_eq!(again.graphs, b.graphs);
    assert_eq!(again.class_count, b.class_count);
    assert_eq!(again.node_label_count, b.node_label_count);
}

#[test]
fn random_bundle_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let graphs: Vec<Graph> = (0..30)
        .map(|i| {
            let n = rng.gen_range(1..15);
            Graph::random(&mut rng, n, 0.3, 5, i % 3)
        })
        .collect();
    let b = DatasetBundle::from_graphs("RAND", graphs);
    let dir = tempfile::tempdir().unwrap();
    write_tu_dataset(&b, dir.path().join("RAND")).unwrap();
    // both the parent and the dataset directory itself are accepted as roots
    let from_parent = load_tu_dataset(dir.path(), "RAND").unwrap();
    let from_dir = load_tu_dataset(dir.path().join("RAND"), "RAND").unwrap();
    assert_eq!(from_parent.graphs, from_dir.graphs);
    // labels unused by any node are compacted away on reload, so compare edges and classes
    for (x, y) in b.graphs.iter().zip(&from_parent.graphs) {
        assert_eq!(x.edges().collect::<Vec<_>>(), y.edges().collect::<Vec<_>>());
        assert_eq!(x.class_label(), y.class_label());
    }
}

#[test]
fn missing_directory_names_the_path() {
    let err = load_tu_dataset("/definitely/not/here", "MUTAG").unwrap_err();
    assert!(matches!(err, SlimError::MissingFile { .. }));
    assert!(err.to_string().contains("/definitely/not/here"));
    assert!(err.is_io());
}
