//! Structural landmarks: Student-t soft assignment, the self-sharpened
//! target distribution, the KL clustering loss and k-means initialisation.

use ndarray::{Array2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Result, SlimError};
use crate::grad::{sq_dist, Tape, Var};

/// Guard added to an empty column mass in [`target_distribution`].
pub const COLUMN_MASS_GUARD: f64 = 1e-12;
const LLOYD_TOLERANCE: f64 = 1e-6;
const LLOYD_MAX_ITERS: usize = 100;
const DUPLICATE_JITTER: f64 = 1e-4;

/// K landmark vectors (rows of `u`) and the Student-t degrees of freedom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub u: Array2<f64>,
    pub dof: f64,
}

impl LandmarkSet {
    pub fn new(u: Array2<f64>) -> Self {
        LandmarkSet { u, dof: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.u.nrows() == 0
    }
}

/// Soft assignments `W` (n × K), rows summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub values: Array2<f64>,
}

/// Sharpened targets `W̃`, treated as constants during differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    pub values: Array2<f64>,
}

/// `W(j,k) ∝ (1 + ‖h_j − μ_k‖² / α)^{−(α+1)/2}`, normalised over k.
pub fn assign_on_tape(tape: &mut Tape<'_>, h: Var, u: Var, dof: f64) -> Result<Var> {
    if !(dof > 0.0) {
        return Err(SlimError::Config(format!(
            "Student-t degrees of freedom must be positive, got {dof}"
        )));
    }
    let d2 = tape.squared_distance_rows(h, u)?;
    let base = tape.affine(d2, 1.0 / dof, 1.0);
    let kernel = tape.powf(base, -(dof + 1.0) / 2.0)?;
    tape.normalize_rows(kernel)
}

pub fn assign(h: &EmbeddingMatrix, lm: &LandmarkSet) -> Result<AssignmentMatrix> {
    let mut tape = Tape::new();
    let hv = tape.leaf_ref(&h.values, false);
    let uv = tape.leaf_ref(&lm.u, false);
    let w = assign_on_tape(&mut tape, hv, uv, lm.dof)?;
    Ok(AssignmentMatrix {
        values: tape.value(w).clone(),
    })
}

/// `W̃(j,k) = (W(j,k)² / f_k) / Σ_k' (W(j,k')² / f_k')` with `f_k = Σ_l W(l,k)`.
pub fn target_distribution(w: &AssignmentMatrix) -> TargetMatrix {
    let mass = w
        .values
        .sum_axis(Axis(0))
        .mapv(|f| if f > 0.0 { f } else { f + COLUMN_MASS_GUARD });
    let mut t = &w.values * &w.values / &mass;
    for mut row in t.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    TargetMatrix { values: t }
}

/// `KL(W̃ ‖ W)`; only `w` carries gradient.
pub fn cluster_loss_on_tape(tape: &mut Tape<'_>, w: Var, target: &TargetMatrix) -> Result<Var> {
    let t = tape.constant(target.values.clone());
    tape.kl_div(t, w)
}

pub fn cluster_loss(w: &AssignmentMatrix, target: &TargetMatrix) -> Result<f64> {
    let mut tape = Tape::new();
    let wv = tape.leaf_ref(&w.values, false);
    let loss = cluster_loss_on_tape(&mut tape, wv, target)?;
    Ok(tape.scalar(loss))
}

/// Index and squared distance of the nearest centroid; ties go to the lower index.
pub fn nearest(point: ndarray::ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Hard distortion `Σ_j min_k ‖h_j − μ_k‖²`, reported as a diagnostic.
pub fn hard_distortion(points: &Array2<f64>, centroids: &Array2<f64>) -> f64 {
    points
        .rows()
        .into_iter()
        .map(|p| nearest(p, centroids).1)
        .sum()
}

fn kmeans_pp<R: Rng>(points: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut closest: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, points.row(first)))
        .collect();
    let mut warned = false;
    for c in 1..k {
        match WeightedIndex::new(&closest) {
            Ok(dist) => {
                let i = dist.sample(rng);
                centroids.row_mut(c).assign(&points.row(i));
            }
            Err(_) => {
                // every point already coincides with a centroid
                if !warned {
                    log::warn!(
                        "fewer distinct points than {k} landmarks; jittering duplicate centroids"
                    );
                    warned = true;
                }
                let i = rng.gen_range(0..n);
                let jittered = points
                    .row(i)
                    .mapv(|x| x + rng.gen_range(-DUPLICATE_JITTER..=DUPLICATE_JITTER));
                centroids.row_mut(c).assign(&jittered);
            }
        }
        let newest = centroids.row(c);
        for (d, p) in closest.iter_mut().zip(points.rows()) {
            *d = d.min(sq_dist(p, newest));
        }
    }
    centroids
}

/// Lloyd iterations from the given centroids. Empty clusters keep their centroid.
pub fn lloyd(points: &Array2<f64>, mut centroids: Array2<f64>) -> Array2<f64> {
    let (k, d) = centroids.dim();
    for _ in 0..LLOYD_MAX_ITERS {
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for p in points.rows() {
            let (c, _) = nearest(p, &centroids);
            let mut s = sums.row_mut(c);
            s += &p;
            counts[c] += 1;
        }
        let mut shift: f64 = 0.0;
        for (c, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let mean = sums.row(c).mapv(|x| x / count as f64);
            shift = shift.max(sq_dist(mean.view(), centroids.row(c)).sqrt());
            centroids.row_mut(c).assign(&mean);
        }
        if shift < LLOYD_TOLERANCE {
            break;
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations over the stacked embeddings.
pub fn init_landmarks(all_h: &Array2<f64>, k: usize, seed: u64) -> Result<LandmarkSet> {
    if k == 0 {
        return Err(SlimError::Config(
            "landmark count must be at least 1".into(),
        ));
    }
    if all_h.nrows() < k {
        return Err(SlimError::Config(format!(
            "{} embedded substructures cannot seed {k} landmarks",
            all_h.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = kmeans_pp(all_h, k, &mut rng);
    Ok(LandmarkSet::new(lloyd(all_h, seeds)))
}
