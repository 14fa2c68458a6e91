//! k-hop substructure descriptors: one row per node counting the node types
//! found in its breadth-first neighbourhood.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::Graph;
use crate::error::{Result, SlimError};

pub const MAX_HOPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// `A^(k) X`
    NodeDistribution,
    /// `[X, A^(k) X]`
    CenterEmphasis,
    /// `[Ã^(1) X, …, Ã^(k) X]`
    LayerWise,
    /// `X + Σ_j γ^j Ã^(j) X`
    WeightedLayerSum,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::NodeDistribution,
        Variant::CenterEmphasis,
        Variant::LayerWise,
        Variant::WeightedLayerSum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NodeDistribution => "node-distribution",
            Variant::CenterEmphasis => "center-emphasis",
            Variant::LayerWise => "layer-wise",
            Variant::WeightedLayerSum => "weighted-layer-sum",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = SlimError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| SlimError::Config(format!("unknown substructure variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubstructureConfig {
    pub hops: usize,
    pub variant: Variant,
    pub layer_decay: f64,
}

impl Default for SubstructureConfig {
    fn default() -> Self {
        SubstructureConfig {
            hops: 3,
            variant: Variant::NodeDistribution,
            layer_decay: 0.5,
        }
    }
}

impl SubstructureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hops > MAX_HOPS {
            return Err(SlimError::Config(format!(
                "hops = {} exceeds the limit of {MAX_HOPS}",
                self.hops
            )));
        }
        if self.hops == 0 && self.variant != Variant::NodeDistribution {
            return Err(SlimError::Config(format!(
                "variant {} needs hops >= 1",
                self.variant
            )));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(SlimError::Config(format!(
                "layer decay must lie in (0, 1], got {}",
                self.layer_decay
            )));
        }
        Ok(())
    }

    /// Width of `Z` for `c` node types.
    pub fn feature_width(&self, c: usize) -> usize {
        match self.variant {
            Variant::NodeDistribution | Variant::WeightedLayerSum => c,
            Variant::CenterEmphasis => 2 * c,
            Variant::LayerWise => self.hops * c,
        }
    }
}

/// Per-graph substructure matrix `Z` (n × D).
#[derive(Debug, Clone, PartialEq)]
pub struct SubstructureMatrix {
    pub values: Array2<f64>,
}

impl SubstructureMatrix {
    pub fn feature_width(&self) -> usize {
        self.values.ncols()
    }
}

/// BFS distances from every node, truncated at `max_depth`; `None` beyond.
pub fn hop_distances(g: &Graph, max_depth: usize) -> Vec<Vec<Option<usize>>> {
    let n = g.node_count();
    let mut out = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    for source in 0..n {
        let mut dist = vec![None; n];
        dist[source] = Some(0);
        queue.clear();
        queue.push_back(source);
        while let Some(v) = queue.pop_front() {
            let dv = dist[v].unwrap_or(0);
            if dv == max_depth {
                continue;
            }
            for &w in g.neighbors(v) {
                if dist[w].is_none() {
                    dist[w] = Some(dv + 1);
                    queue.push_back(w);
                }
            }
        }
        out.push(dist);
    }
    out
}

fn indicator(g: &Graph, depth: usize, keep: impl Fn(usize) -> bool) -> Array2<f64> {
    let dist = hop_distances(g, depth);
    let n = g.node_count();
    Array2::from_shape_fn((n, n), |(p, q)| match dist[p][q] {
        Some(d) if keep(d) => 1.0,
        _ => 0.0,
    })
}

/// `A^(k)`: 1 where the BFS distance is at most `k` (diagonal included).
pub fn khop_adjacency(g: &Graph, k: usize) -> Array2<f64> {
    indicator(g, k, |d| d <= k)
}

/// `Ã^(j)`: 1 where the BFS distance is exactly `j`.
pub fn exact_layer_adjacency(g: &Graph, j: usize) -> Array2<f64> {
    indicator(g, j, |d| d == j)
}

/// Builds `Z` for one graph. `x` must be the graph's one-hot feature matrix
/// (or any n × c node feature matrix).
pub fn build_substructures(
    g: &Graph,
    x: &Array2<f64>,
    cfg: &SubstructureConfig,
) -> Result<SubstructureMatrix> {
    cfg.validate()?;
    let n = g.node_count();
    if x.nrows() != n {
        return Err(SlimError::shape(
            "build_substructures",
            format!("{n} feature rows"),
            format!("{}", x.nrows()),
        ));
    }
    let c = x.ncols();
    let k = cfg.hops;
    let dist = hop_distances(g, k);

    // layers[j] = Ã^(j) X for j = 0..=k, accumulated directly from distances
    let mut layers = vec![Array2::<f64>::zeros((n, c)); k + 1];
    for (p, row) in dist.iter().enumerate() {
        for (q, d) in row.iter().enumerate() {
            if let Some(d) = *d {
                let mut dst = layers[d].row_mut(p);
                dst += &x.row(q);
            }
        }
    }

    let ball = || {
        layers
            .iter()
            .fold(Array2::<f64>::zeros((n, c)), |acc, l| acc + l)
    };
    let values = match cfg.variant {
        Variant::NodeDistribution => ball(),
        Variant::CenterEmphasis => {
            let mut z = Array2::zeros((n, 2 * c));
            z.slice_mut(s![.., ..c]).assign(x);
            z.slice_mut(s![.., c..]).assign(&ball());
            z
        }
        Variant::LayerWise => {
            let mut z = Array2::zeros((n, k * c));
            for (j, layer) in layers[1..=k].iter().enumerate() {
                z.slice_mut(s![.., j * c..(j + 1) * c]).assign(layer);
            }
            z
        }
        Variant::WeightedLayerSum => {
            let mut z = x.clone();
            let mut weight = 1.0;
            for layer in &layers[1..] {
                weight *= cfg.layer_decay;
                z.scaled_add(weight, layer);
            }
            z
        }
    };
    Ok(SubstructureMatrix { values })
}
