//! Identity-preserving graph pooling onto the landmark set.
//!
//! Given soft assignments `W` (n × K), a graph is summarised by the landmark
//! densities `p = Wᵀ1`, per-landmark node-type means `M = Xᵀ W diag(p)⁻¹`,
//! the interaction mass `C = Wᵀ A W` and its normalisation
//! `C̃ = diag(p)⁻¹ C diag(p)⁻¹`. An `EPS` guard keeps empty landmarks finite.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlimError};
use crate::grad::{Tape, Var};
use crate::landmarks::AssignmentMatrix;

pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    /// Flattened `C̃` only (K² values).
    #[default]
    Interaction,
    /// `[vec(C̃), p, vec(M)]`.
    InteractionDensityMeans,
}

impl FeatureSet {
    pub fn width(self, landmarks: usize, node_types: usize) -> usize {
        match self {
            FeatureSet::Interaction => landmarks * landmarks,
            FeatureSet::InteractionDensityMeans => {
                landmarks * landmarks + landmarks + node_types * landmarks
            }
        }
    }
}

impl std::str::FromStr for FeatureSet {
    type Err = SlimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interaction" => Ok(FeatureSet::Interaction),
            "interaction-density-means" | "full" => Ok(FeatureSet::InteractionDensityMeans),
            _ => Err(SlimError::Config(format!("unknown feature set {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    pub p: Array1<f64>,
    pub m: Array2<f64>,
    pub c: Array2<f64>,
    pub c_norm: Array2<f64>,
}

pub fn density(w: &AssignmentMatrix) -> Array1<f64> {
    w.values.sum_axis(Axis(0))
}

pub fn landmark_means(
    x: &Array2<f64>,
    w: &AssignmentMatrix,
    p: &Array1<f64>,
) -> Result<Array2<f64>> {
    if x.nrows() != w.values.nrows() || p.len() != w.values.ncols() {
        return Err(SlimError::shape(
            "landmark_means",
            format!(
                "{} rows and {} densities",
                w.values.nrows(),
                w.values.ncols()
            ),
            format!("{} rows and {} densities", x.nrows(), p.len()),
        ));
    }
    Ok(x.t().dot(&w.values) / &p.mapv(|v| v + EPS))
}

pub fn interaction(w: &AssignmentMatrix, adjacency: &Array2<f64>) -> Result<Array2<f64>> {
    let n = w.values.nrows();
    if adjacency.dim() != (n, n) {
        return Err(SlimError::shape(
            "interaction",
            format!("{n}x{n} adjacency"),
            format!("{:?}", adjacency.dim()),
        ));
    }
    Ok(w.values.t().dot(&adjacency.dot(&w.values)))
}

pub fn normalized_interaction(c: &Array2<f64>, p: &Array1<f64>) -> Array2<f64> {
    let r = p.mapv(|v| 1.0 / (v + EPS));
    Array2::from_shape_fn(c.dim(), |(i, j)| c[[i, j]] * r[i] * r[j])
}

/// Row-major flattening of `C̃`.
pub fn graph_feature(pf: &PooledFeatures) -> Array1<f64> {
    pf.c_norm.iter().copied().collect()
}

pub fn pool(
    x: &Array2<f64>,
    w: &AssignmentMatrix,
    adjacency: &Array2<f64>,
) -> Result<PooledFeatures> {
    let p = density(w);
    let m = landmark_means(x, w, &p)?;
    let c = interaction(w, adjacency)?;
    let c_norm = normalized_interaction(&c, &p);
    Ok(PooledFeatures { p, m, c, c_norm })
}

/// Pooled quantities on a tape; `p` is a 1 × K row.
#[derive(Debug, Clone, Copy)]
pub struct PoolVars {
    pub p: Var,
    pub m: Var,
    pub c: Var,
    pub c_norm: Var,
}

pub fn pool_on_tape(tape: &mut Tape<'_>, w: Var, x: Var, adjacency: Var) -> Result<PoolVars> {
    let p = tape.column_sums(w);
    let xt = tape.transpose(x);
    let xw = tape.matmul(xt, w)?;
    let m = tape.scale_cols(xw, p, EPS)?;
    let wt = tape.transpose(w);
    let aw = tape.matmul(adjacency, w)?;
    let c = tape.matmul(wt, aw)?;
    let c_norm = tape.diag_sandwich(c, p, EPS)?;
    Ok(PoolVars { p, m, c, c_norm })
}

/// Classifier input as a 1 × F row.
pub fn feature_on_tape(tape: &mut Tape<'_>, pooled: &PoolVars, set: FeatureSet) -> Result<Var> {
    let k = tape.value(pooled.c_norm).nrows();
    let flat = tape.reshape(pooled.c_norm, 1, k * k)?;
    match set {
        FeatureSet::Interaction => Ok(flat),
        FeatureSet::InteractionDensityMeans => {
            let c = tape.value(pooled.m).nrows();
            let m = tape.reshape(pooled.m, 1, c * k)?;
            tape.concat_cols(&[flat, pooled.p, m])
        }
    }
}

impl PooledFeatures {
    pub fn from_tape(tape: &Tape<'_>, vars: &PoolVars) -> Self {
        PooledFeatures {
            p: tape.value(vars.p).row(0).to_owned(),
            m: tape.value(vars.m).clone(),
            c: tape.value(vars.c).clone(),
            c_norm: tape.value(vars.c_norm).clone(),
        }
    }
}
