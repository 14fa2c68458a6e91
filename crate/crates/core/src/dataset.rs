//! TU-format dataset loading, one-hot node features and stratified folds.
//!
//! A TU dataset named `DS` is a directory of comma/line separated text files:
//! `DS_A.txt` (directed 1-indexed node pairs), `DS_graph_indicator.txt` (graph id
//! per node), `DS_graph_labels.txt` (class per graph) and the optional
//! `DS_node_labels.txt` (categorical label per node). Edge labels and node
//! attributes are ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlimError};

/// Label range used for degree-derived node labels when a dataset ships none.
pub const DEGREE_LABEL_CAP: usize = 10;

/// An undirected, node-labelled graph with a class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    neighbors: Vec<Vec<usize>>,
    node_labels: Vec<usize>,
    class_label: usize,
}

/// Counts of input irregularities dropped while building graphs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCleanup {
    pub self_loops: usize,
    pub duplicate_edges: usize,
}

impl EdgeCleanup {
    fn absorb(&mut self, other: EdgeCleanup) {
        self.self_loops += other.self_loops;
        self.duplicate_edges += other.duplicate_edges;
    }
}

impl Graph {
    /// Builds a graph from directed 0-indexed pairs. Pairs are symmetrized,
    /// self-loops and repeated pairs are dropped and counted.
    pub fn new(
        node_count: usize,
        pairs: &[(usize, usize)],
        node_labels: Vec<usize>,
        class_label: usize,
    ) -> Result<Self> {
        Self::with_cleanup(node_count, pairs, node_labels, class_label).map(|(g, _)| g)
    }

    pub fn with_cleanup(
        node_count: usize,
        pairs: &[(usize, usize)],
        node_labels: Vec<usize>,
        class_label: usize,
    ) -> Result<(Self, EdgeCleanup)> {
        if node_count == 0 {
            return Err(SlimError::Config(
                "graph must have at least one node".into(),
            ));
        }
        if node_labels.len() != node_count {
            return Err(SlimError::shape(
                "Graph::new",
                format!("{node_count} node labels"),
                format!("{}", node_labels.len()),
            ));
        }
        let mut cleanup = EdgeCleanup::default();
        let mut seen = BTreeSet::new();
        let mut sets = vec![BTreeSet::new(); node_count];
        for &(p, q) in pairs {
            if p >= node_count || q >= node_count {
                return Err(SlimError::shape(
                    "Graph::new",
                    format!("endpoints below {node_count}"),
                    format!("({p}, {q})"),
                ));
            }
            if p == q {
                cleanup.self_loops += 1;
                continue;
            }
            if !seen.insert((p, q)) {
                cleanup.duplicate_edges += 1;
                continue;
            }
            sets[p].insert(q);
            sets[q].insert(p);
        }
        let neighbors = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok((
            Graph {
                neighbors,
                node_labels,
                class_label,
            },
            cleanup,
        ))
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn node_labels(&self) -> &[usize] {
        &self.node_labels
    }

    pub fn class_label(&self) -> usize {
        self.class_label
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Undirected edges as `(p, q)` with `p < q`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(p, ns)| ns.iter().filter(move |&&q| q > p).map(move |&q| (p, q)))
    }

    /// Dense symmetric 0/1 adjacency matrix.
    pub fn adjacency_matrix(&self) -> Array2<f64> {
        let n = self.node_count();
        let mut a = Array2::zeros((n, n));
        for (p, ns) in self.neighbors.iter().enumerate() {
            for &q in ns {
                a[[p, q]] = 1.0;
            }
        }
        a
    }

    /// Relabels nodes so that old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let n = self.node_count();
        assert_eq!(perm.len(), n, "permutation length must equal node count");
        let mut neighbors = vec![Vec::new(); n];
        let mut node_labels = vec![0; n];
        for (old, ns) in self.neighbors.iter().enumerate() {
            let mut mapped: Vec<usize> = ns.iter().map(|&q| perm[q]).collect();
            mapped.sort_unstable();
            neighbors[perm[old]] = mapped;
            node_labels[perm[old]] = self.node_labels[old];
        }
        Graph {
            neighbors,
            node_labels,
            class_label: self.class_label,
        }
    }

    pub fn with_class_label(mut self, class_label: usize) -> Graph {
        self.class_label = class_label;
        self
    }

    /// Erdős–Rényi graph with uniformly drawn node labels.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        nodes: usize,
        edge_prob: f64,
        node_types: usize,
        class_label: usize,
    ) -> Graph {
        let labels = (0..nodes)
            .map(|_| rng.gen_range(0..node_types.max(1)))
            .collect();
        let mut edges = Vec::new();
        for u in 0..nodes {
            for v in u + 1..nodes {
                if rng.gen_bool(edge_prob) {
                    edges.push((u, v));
                }
            }
        }
        Graph::new(nodes, &edges, labels, class_label).expect("generated edges are in range")
    }
}

/// A loaded dataset: graphs plus the densified label alphabets.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub node_label_count: usize,
    pub class_count: usize,
    pub cleanup: EdgeCleanup,
}

impl DatasetBundle {
    /// Builds a bundle from graphs whose labels are already dense.
    pub fn from_graphs(name: impl Into<String>, graphs: Vec<Graph>) -> Self {
        let node_label_count = graphs
            .iter()
            .flat_map(|g| g.node_labels().iter().copied())
            .max()
            .map_or(0, |m| m + 1);
        let class_count = graphs
            .iter()
            .map(Graph::class_label)
            .max()
            .map_or(0, |m| m + 1);
        DatasetBundle {
            name: name.into(),
            graphs,
            node_label_count,
            class_count,
            cleanup: EdgeCleanup::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn class_labels(&self) -> Vec<usize> {
        self.graphs.iter().map(Graph::class_label).collect()
    }
}

fn dataset_file(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.txt"))
}

/// Non-blank lines paired with their 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    if !path.exists() {
        return Err(SlimError::MissingFile { path: path.into() });
    }
    let text = fs::read_to_string(path).map_err(|e| SlimError::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn parse_int(path: &Path, line: usize, field: &str) -> Result<i64> {
    field.trim().parse::<i64>().map_err(|_| SlimError::Parse {
        path: path.into(),
        line,
        msg: format!("expected an integer, found {:?}", field.trim()),
    })
}

fn parse_column(path: &Path) -> Result<Vec<(usize, i64)>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            // some TU files carry extra comma separated columns; the first one is the value
            let first = text.split(',').next().unwrap_or("");
            Ok((line, parse_int(path, line, first)?))
        })
        .collect()
}

/// Maps the distinct raw values onto `0..m` in ascending order.
fn densify(raw: &[i64]) -> BTreeMap<i64, usize> {
    raw.iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect()
}

/// Loads `<root>/<name>_*.txt`. Both `root` pointing at the dataset
/// directory itself and at its parent are accepted.
pub fn load_tu_dataset(root: impl AsRef<Path>, name: &str) -> Result<DatasetBundle> {
    let root = root.as_ref();
    let dir = if dataset_file(root, name, "A").exists() || !root.join(name).is_dir() {
        root.to_path_buf()
    } else {
        root.join(name)
    };
    if !dir.is_dir() {
        return Err(SlimError::MissingFile { path: dir });
    }

    let indicator_path = dataset_file(&dir, name, "graph_indicator");
    let labels_path = dataset_file(&dir, name, "graph_labels");
    let edges_path = dataset_file(&dir, name, "A");
    let node_labels_path = dataset_file(&dir, name, "node_labels");

    let graph_labels = parse_column(&labels_path)?;
    let indicator = parse_column(&indicator_path)?;
    let graph_count = graph_labels.len();

    // node id (0-based, global) -> (graph, local index)
    let mut node_slot = Vec::with_capacity(indicator.len());
    let mut sizes = vec![0usize; graph_count];
    for &(line, gid) in &indicator {
        if gid < 1 || gid as usize > graph_count {
            return Err(SlimError::Parse {
                path: indicator_path.clone(),
                line,
                msg: format!("graph id {gid} outside 1..={graph_count}"),
            });
        }
        let g = gid as usize - 1;
        node_slot.push((g, sizes[g]));
        sizes[g] += 1;
    }
    if let Some(g) = sizes.iter().position(|&s| s == 0) {
        return Err(SlimError::Parse {
            path: labels_path.clone(),
            line: graph_labels[g].0,
            msg: format!("graph {} has no nodes", g + 1),
        });
    }

    let raw_node_labels: Option<Vec<i64>> = if node_labels_path.exists() {
        let col = parse_column(&node_labels_path)?;
        if col.len() != node_slot.len() {
            return Err(SlimError::Parse {
                path: node_labels_path.clone(),
                line: col.last().map_or(1, |c| c.0),
                msg: format!("{} node labels for {} nodes", col.len(), node_slot.len()),
            });
        }
        Some(col.into_iter().map(|(_, v)| v).collect())
    } else {
        None
    };

    let mut pairs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); graph_count];
    for (line, text) in read_lines(&edges_path)? {
        let mut fields = text.split(',');
        let (Some(a), Some(b)) = (fields.next(), fields.next()) else {
            return Err(SlimError::Parse {
                path: edges_path.clone(),
                line,
                msg: "expected \"i, j\"".into(),
            });
        };
        let endpoint = |field: &str| -> Result<(usize, usize)> {
            let id = parse_int(&edges_path, line, field)?;
            if id < 1 || id as usize > node_slot.len() {
                return Err(SlimError::Parse {
                    path: edges_path.clone(),
                    line,
                    msg: format!("edge endpoint {id} references an unknown node"),
                });
            }
            Ok(node_slot[id as usize - 1])
        };
        let (ga, la) = endpoint(a)?;
        let (gb, lb) = endpoint(b)?;
        if ga != gb {
            return Err(SlimError::Parse {
                path: edges_path.clone(),
                line,
                msg: format!("edge joins graphs {} and {}", ga + 1, gb + 1),
            });
        }
        pairs[ga].push((la, lb));
    }

    let class_map = densify(&graph_labels.iter().map(|l| l.1).collect::<Vec<_>>());
    let node_map = raw_node_labels.as_deref().map(densify);

    let mut local_labels: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    if let (Some(raw), Some(map)) = (&raw_node_labels, &node_map) {
        for (node, &(g, _)) in node_slot.iter().enumerate() {
            local_labels[g].push(map[&raw[node]]);
        }
    }

    let mut cleanup = EdgeCleanup::default();
    let mut graphs = Vec::with_capacity(graph_count);
    for (g, edge_list) in pairs.iter().enumerate() {
        let labels = if raw_node_labels.is_some() {
            std::mem::take(&mut local_labels[g])
        } else {
            vec![0; sizes[g]]
        };
        let class = class_map[&graph_labels[g].1];
        let (mut graph, c) = Graph::with_cleanup(sizes[g], edge_list, labels, class)?;
        if raw_node_labels.is_none() {
            graph.node_labels = (0..graph.node_count())
                .map(|v| graph.degree(v).min(DEGREE_LABEL_CAP - 1))
                .collect();
        }
        cleanup.absorb(c);
        graphs.push(graph);
    }
    if cleanup.self_loops > 0 || cleanup.duplicate_edges > 0 {
        log::warn!(
            "{name}: dropped {} self-loops and {} duplicate edges",
            cleanup.self_loops,
            cleanup.duplicate_edges
        );
    }

    let mut bundle = DatasetBundle::from_graphs(name, graphs);
    bundle.class_count = class_map.len();
    bundle.cleanup = cleanup;
    Ok(bundle)
}

/// Writes the bundle back out in TU format with dense labels.
pub fn write_tu_dataset(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| SlimError::io(dir, e))?;
    let mut a = String::new();
    let mut indicator = String::new();
    let mut node_labels = String::new();
    let mut graph_labels = String::new();
    let mut offset = 0;
    for (gid, g) in bundle.graphs.iter().enumerate() {
        for v in 0..g.node_count() {
            indicator.push_str(&format!("{}\n", gid + 1));
            node_labels.push_str(&format!("{}\n", g.node_labels()[v]));
            for &q in g.neighbors(v) {
                a.push_str(&format!("{}, {}\n", offset + v + 1, offset + q + 1));
            }
        }
        graph_labels.push_str(&format!("{}\n", g.class_label()));
        offset += g.node_count();
    }
    let name = &bundle.name;
    for (suffix, body) in [
        ("A", a),
        ("graph_indicator", indicator),
        ("graph_labels", graph_labels),
        ("node_labels", node_labels),
    ] {
        let path = dataset_file(dir, name, suffix);
        fs::write(&path, body).map_err(|e| SlimError::io(&path, e))?;
    }
    Ok(())
}

/// One-hot node feature matrix `X` (n × c).
pub fn one_hot_features(g: &Graph, c: usize) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((g.node_count(), c));
    for (node, &label) in g.node_labels().iter().enumerate() {
        if label >= c {
            return Err(SlimError::Range {
                node,
                label,
                limit: c,
            });
        }
        x[[node, label]] = 1.0;
    }
    Ok(x)
}

/// Assignment of graphs to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_count: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn training_members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.fold_count];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified fold assignment. Each class is shuffled with the seeded RNG
/// and dealt round-robin; the dealing position carries over between classes
/// so overall fold sizes also differ by at most one.
pub fn make_folds(bundle: &DatasetBundle, fold_count: usize, seed: u64) -> Result<FoldPlan> {
    stratified_folds(&bundle.class_labels(), fold_count, seed)
}

pub fn stratified_folds(labels: &[usize], fold_count: usize, seed: u64) -> Result<FoldPlan> {
    if fold_count < 2 {
        return Err(SlimError::Config(format!(
            "fold count must be at least 2, got {fold_count}"
        )));
    }
    if fold_count > labels.len() {
        return Err(SlimError::Config(format!(
            "fold count {fold_count} exceeds graph count {}",
            labels.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0; labels.len()];
    let mut cursor = 0;
    for (class, members) in by_class.iter_mut() {
        if members.len() < fold_count {
            log::warn!(
                "class {class} has {} members for {fold_count} folds; some folds will lack it",
                members.len()
            );
        }
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignments[i] = cursor % fold_count;
            cursor += 1;
        }
    }
    Ok(FoldPlan {
        fold_count,
        assignments,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, suffix: &str, body: &str) {
        fs::write(dataset_file(dir, name, suffix), body).unwrap();
    }

    fn tiny_dataset(dir: &Path) {
        write(dir, "T", "A", "1, 2\n2, 1\n");
        write(dir, "T", "graph_indicator", "1\n1\n");
        write(dir, "T", "graph_labels", "1\n");
        write(dir, "T", "node_labels", "0\n0\n");
    }

    #[test]
    fn smallest_valid_dataset() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let b = load_tu_dataset(dir.path(), "T").unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.graphs[0].node_count(), 2);
        assert_eq!(b.graphs[0].edge_count(), 1);
        assert_eq!(b.cleanup, EdgeCleanup::default());
        assert_eq!(b.class_count, 1);
    }

    #[test]
    fn one_directional_edges_are_symmetrized_and_crlf_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "T", "A", "1, 2\r\n2, 3\r\n3, 3\r\n1, 2\r\n");
        write(dir.path(), "T", "graph_indicator", "1\r\n1\r\n1\r\n");
        write(dir.path(), "T", "graph_labels", "-1\r\n");
        let b = load_tu_dataset(dir.path(), "T").unwrap();
        let g = &b.graphs[0];
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(b.cleanup.self_loops, 1);
        assert_eq!(b.cleanup.duplicate_edges, 1);
        // no node labels: degree, capped
        assert_eq!(g.node_labels(), &[1, 2, 1]);
        assert_eq!(b.node_label_count, 3);
    }

    #[test]
    fn missing_mandatory_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        fs::remove_file(dataset_file(dir.path(), "T", "graph_indicator")).unwrap();
        let err = load_tu_dataset(dir.path(), "T").unwrap_err();
        assert!(err.to_string().contains("T_graph_indicator.txt"), "{err}");
        assert!(err.is_io());
    }

    #[test]
    fn unknown_endpoint_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        write(dir.path(), "T", "A", "1, 2\n2, 7\n");
        match load_tu_dataset(dir.path(), "T").unwrap_err() {
            SlimError::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("unknown node"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_graph_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        write(dir.path(), "T", "graph_labels", "1\n0\n");
        assert!(matches!(
            load_tu_dataset(dir.path(), "T").unwrap_err(),
            SlimError::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn class_labels_are_densified() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "T", "A", "");
        write(dir.path(), "T", "graph_indicator", "1\n2\n3\n");
        write(dir.path(), "T", "graph_labels", "3\n1\n3\n");
        write(dir.path(), "T", "node_labels", "4\n9\n4\n");
        let b = load_tu_dataset(dir.path(), "T").unwrap();
        assert_eq!(b.class_labels(), vec![1, 0, 1]);
        assert_eq!(b.class_count, 2);
        assert_eq!(b.node_label_count, 2);
        assert_eq!(b.graphs[1].node_labels(), &[1]);
    }

    #[test]
    fn one_hot_cases() {
        let g = Graph::new(1, &[], vec![0], 0).unwrap();
        assert_eq!(one_hot_features(&g, 1).unwrap(), ndarray::array![[1.0]]);
        let g = Graph::new(2, &[(0, 1)], vec![0, 2], 0).unwrap();
        assert_eq!(
            one_hot_features(&g, 3).unwrap(),
            ndarray::array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
        );
        assert!(matches!(
            one_hot_features(&g, 2),
            Err(SlimError::Range {
                node: 1,
                label: 2,
                limit: 2
            })
        ));
    }

    #[test]
    fn balanced_classes_fill_every_fold_once() {
        let labels = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let plan = stratified_folds(&labels, 5, 3).unwrap();
        for f in 0..5 {
            let members = plan.fold_members(f);
            assert_eq!(members.len(), 2);
            let classes: BTreeSet<_> = members.iter().map(|&i| labels[i]).collect();
            assert_eq!(classes.len(), 2);
        }
        assert_eq!(plan, stratified_folds(&labels, 5, 3).unwrap());
    }

    #[test]
    fn fold_configuration_errors() {
        let labels = [0, 1, 0];
        assert!(matches!(
            stratified_folds(&labels, 1, 0),
            Err(SlimError::Config(_))
        ));
        assert!(matches!(
            stratified_folds(&labels, 4, 0),
            Err(SlimError::Config(_))
        ));
    }

    #[test]
    fn permutation_moves_labels_and_edges() {
        let g = Graph::new(3, &[(0, 1), (1, 2)], vec![0, 1, 2], 1).unwrap();
        let p = g.permuted(&[2, 0, 1]);
        assert_eq!(p.node_labels(), &[1, 2, 0]);
        assert_eq!(p.neighbors(0), &[1, 2]);
        assert_eq!(p.edges().collect::<Vec<_>>(), vec![(0, 1), (0, 2)]);
        assert_eq!(p.class_label(), 1);
    }
}
