//! Landmark redundancy: mutual coherence, sparse-recovery limits, the
//! coherence lower bound as a function of K, and empirical sweeps over
//! synthetic Gaussian mixtures.

use ndarray::{Array1, Array2};
use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlimError};
use crate::landmarks::{init_landmarks, nearest};
use crate::parallel::Execution;

/// Largest absolute cosine between two distinct rows of `u`.
pub fn mutual_coherence(u: &Array2<f64>) -> Result<f64> {
    let k = u.nrows();
    if k < 2 {
        return Err(SlimError::Config(format!(
            "mutual coherence needs at least 2 landmarks, got {k}"
        )));
    }
    let norms: Vec<f64> = u.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(SlimError::Numeric {
            op: "mutual_coherence",
            detail: format!("landmark {i} has norm {}", norms[i]),
        });
    }
    let mut best: f64 = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let c = (u.row(i).dot(&u.row(j)) / (norms[i] * norms[j])).abs();
            best = best.max(c.min(1.0));
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryBound {
    Finite(f64),
    /// Zero coherence places no limit on the recoverable support.
    Unbounded,
}

/// Largest support size `(1 + 1/μ) / 2` with guaranteed recovery.
pub fn recovery_support_bound(mu: f64) -> Result<RecoveryBound> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(SlimError::Config(format!(
            "coherence must lie in [0, 1], got {mu}"
        )));
    }
    if mu == 0.0 {
        return Ok(RecoveryBound::Unbounded);
    }
    Ok(RecoveryBound::Finite((1.0 + 1.0 / mu) / 2.0))
}

/// Volume of the unit ball in `d` dimensions, `2 Γ(1/2)^d / (d Γ(d/2))`.
pub fn unit_ball_volume(d: usize) -> f64 {
    let d_f = d as f64;
    2.0 * libm::tgamma(0.5).powi(d as i32) / (d_f * libm::tgamma(d_f / 2.0))
}

/// `γ_d = 1 + d ln(d ln d)`; needs `d ≥ 2`.
pub fn gamma_d(d: usize) -> f64 {
    let d = d as f64;
    1.0 + d * (d * d.ln()).ln()
}

/// `C_d = 1.5 (1 + ln d / d) γ_d V_d`.
pub fn c_d(d: usize) -> f64 {
    let d_f = d as f64;
    1.5 * (1.0 + d_f.ln() / d_f) * gamma_d(d) * unit_ball_volume(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub d: usize,
    pub k: usize,
    /// Largest landmark norm.
    pub u_max: f64,
    /// Distribution factor `(∫ p^{d/(d+1)})^{(d+1)/d}`.
    pub c_p: f64,
}

impl BoundParams {
    pub fn v_d(&self) -> f64 {
        unit_ball_volume(self.d)
    }

    pub fn gamma_d(&self) -> f64 {
        gamma_d(self.d)
    }

    pub fn c_d(&self) -> f64 {
        c_d(self.d)
    }

    /// `C_d C_p / u_max²`.
    pub fn ratio(&self) -> f64 {
        self.c_d() * self.c_p / (self.u_max * self.u_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundValue {
    /// The bound as evaluated; negative values are vacuous but reported as-is.
    Value(f64),
    /// The expression is undefined for these inputs.
    Vacuous(String),
}

impl BoundValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            BoundValue::Value(v) => Some(*v),
            BoundValue::Vacuous(_) => None,
        }
    }
}

/// `⌊x^{1/d}⌋` computed exactly for the integer-power boundary cases.
fn floor_root(x: f64, d: usize) -> u64 {
    let mut m = x.powf(1.0 / d as f64).floor().max(0.0) as u64;
    while ((m + 1) as f64).powi(d as i32) <= x {
        m += 1;
    }
    while m > 0 && (m as f64).powi(d as i32) > x {
        m -= 1;
    }
    m
}

/// Lower bound on the squared mutual coherence,
/// `1 − 4 ratio K^{−1/d} (⌊(K/2)^{1/d}⌋⁻¹ + 1)` with `ratio = C_d C_p / u_max²`.
pub fn theorem1_bound_from_ratio(d: usize, k: usize, ratio: f64) -> Result<BoundValue> {
    if d < 2 {
        return Err(SlimError::Config(format!(
            "the coherence bound needs d >= 2, got {d}"
        )));
    }
    if k < 2 {
        return Err(SlimError::Config(format!(
            "the coherence bound needs K >= 2, got {k}"
        )));
    }
    if !(ratio.is_finite() && ratio >= 0.0) {
        return Err(SlimError::Config(format!(
            "C_d C_p / u_max^2 must be finite and non-negative, got {ratio}"
        )));
    }
    let floor = floor_root(k as f64 / 2.0, d);
    if floor == 0 {
        return Ok(BoundValue::Vacuous(format!(
            "floor((K/2)^(1/d)) is 0 for K={k}, d={d}"
        )));
    }
    let kd = (k as f64).powf(1.0 / d as f64);
    Ok(BoundValue::Value(
        1.0 - 4.0 * ratio / kd * (1.0 / floor as f64 + 1.0),
    ))
}

pub fn theorem1_lower_bound(bp: &BoundParams) -> Result<BoundValue> {
    if !(bp.u_max > 0.0) {
        return Err(SlimError::Config(format!(
            "u_max must be positive, got {}",
            bp.u_max
        )));
    }
    theorem1_bound_from_ratio(bp.d, bp.k, bp.ratio())
}

/// Mean Euclidean distance from each row of `h` to its nearest landmark.
pub fn distortion(h: &Array2<f64>, u: &Array2<f64>) -> f64 {
    if h.nrows() == 0 || u.nrows() == 0 {
        return 0.0;
    }
    h.rows()
        .into_iter()
        .map(|r| nearest(r, u).1.sqrt())
        .sum::<f64>()
        / h.nrows() as f64
}

/// Equal-weight isotropic Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub scale: f64,
    pub points: usize,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            means: vec![vec![1.0, 4.0], vec![4.0, 1.0], vec![3.0, 3.0]],
            scale: 0.5,
            points: 2000,
        }
    }
}

impl MixtureSpec {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(SlimError::Config(
                "mixture means must be non-empty and share one dimension".into(),
            ));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(SlimError::Config(format!(
                "mixture scale must be positive, got {}",
                self.scale
            )));
        }
        if self.points == 0 {
            return Err(SlimError::Config(
                "mixture must draw at least one point".into(),
            ));
        }
        Ok(())
    }

    pub fn sample(&self, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim();
        let mut out = Array2::zeros((self.points, d));
        for mut row in out.rows_mut() {
            let m = &self.means[rng.gen_range(0..self.means.len())];
            for (x, mu) in row.iter_mut().zip(m) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = mu + self.scale * z;
            }
        }
        out
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let var = self.scale * self.scale;
        let norm = (2.0 * std::f64::consts::PI * var).powf(-d / 2.0);
        let total: f64 = self
            .means
            .iter()
            .map(|m| {
                let r2: f64 = x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
                norm * (-r2 / (2.0 * var)).exp()
            })
            .sum();
        total / self.means.len() as f64
    }

    /// `(∫ p^{d/(d+1)})^{(d+1)/d}` by midpoint integration over a box
    /// covering every component to ±8 standard deviations.
    pub fn estimate_cp(&self, cells_per_axis: usize) -> Result<f64> {
        self.validate()?;
        let d = self.dim();
        if d > 3 {
            return Err(SlimError::Config(format!(
                "grid estimate of C_p supports d <= 3, got {d}"
            )));
        }
        let pad = 8.0 * self.scale;
        let lo: Vec<f64> = (0..d)
            .map(|i| {
                self.means
                    .iter()
                    .map(|m| m[i])
                    .fold(f64::INFINITY, f64::min)
                    - pad
            })
            .collect();
        let hi: Vec<f64> = (0..d)
            .map(|i| {
                self.means
                    .iter()
                    .map(|m| m[i])
                    .fold(f64::NEG_INFINITY, f64::max)
                    + pad
            })
            .collect();
        let step: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| (h - l) / cells_per_axis as f64)
            .collect();
        let cell_volume: f64 = step.iter().product();
        let expo = d as f64 / (d as f64 + 1.0);
        let mut idx = vec![0usize; d];
        let mut point = vec![0.0; d];
        let mut total = 0.0;
        'cells: loop {
            for (i, x) in point.iter_mut().enumerate() {
                *x = lo[i] + (idx[i] as f64 + 0.5) * step[i];
            }
            total += self.density(&point).powf(expo) * cell_volume;
            for i in idx.iter_mut() {
                *i += 1;
                if *i < cells_per_axis {
                    continue 'cells;
                }
                *i = 0;
            }
            break;
        }
        Ok(total.powf(1.0 / expo))
    }
}

/// One (K, seed) cell of a coherence sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceRow {
    pub k: usize,
    pub seed: u64,
    /// Undefined for K = 1.
    pub coherence: Option<f64>,
    pub distortion: f64,
    pub bound: Option<f64>,
}

/// Samples the mixture per seed, fits K landmarks by k-means and records
/// coherence, distortion and the lower bound (with `u_max` over all landmarks).
pub fn empirical_coherence_sweep(
    spec: &MixtureSpec,
    ks: &[usize],
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<CoherenceRow>> {
    spec.validate()?;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > spec.points) {
        return Err(SlimError::Config(format!(
            "K={k} must lie in [1, {}]",
            spec.points
        )));
    }
    let d = spec.dim();
    let c_p = match d {
        2 => Some(spec.estimate_cp(400)?),
        3 => Some(spec.estimate_cp(80)?),
        _ => None,
    };
    let cells: Vec<(usize, u64)> = ks
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    exec.try_map(&cells, |&(k, seed)| {
        let data = spec.sample(seed);
        let u = init_landmarks(&data, k, seed)?.u;
        let coherence = if k >= 2 {
            Some(mutual_coherence(&u)?)
        } else {
            None
        };
        let bound = match c_p {
            Some(c_p) if k >= 2 => {
                let u_max = u
                    .rows()
                    .into_iter()
                    .map(|r| r.dot(&r).sqrt())
                    .fold(0.0, f64::max);
                theorem1_lower_bound(&BoundParams { d, k, u_max, c_p })?.value()
            }
            _ => None,
        };
        Ok(CoherenceRow {
            k,
            seed,
            coherence,
            distortion: distortion(&data, &u),
            bound,
        })
    })
}

pub fn coherence_csv(rows: &[CoherenceRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let mut out = String::from("K,seed,coherence,distortion,bound\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.k,
            r.seed,
            opt(r.coherence),
            r.distortion,
            opt(r.bound)
        ));
    }
    out
}

/// Per-K means of coherence (over defined values) and distortion, in order of first appearance.
pub fn sweep_means(rows: &[CoherenceRow]) -> Vec<(usize, Option<f64>, f64)> {
    let mut ks: Vec<usize> = Vec::new();
    for r in rows {
        if !ks.contains(&r.k) {
            ks.push(r.k);
        }
    }
    ks.into_iter()
        .map(|k| {
            let cell: Vec<&CoherenceRow> = rows.iter().filter(|r| r.k == k).collect();
            let coh: Vec<f64> = cell.iter().filter_map(|r| r.coherence).collect();
            let mc = (!coh.is_empty()).then(|| coh.iter().sum::<f64>() / coh.len() as f64);
            let md = cell.iter().map(|r| r.distortion).sum::<f64>() / cell.len() as f64;
            (k, mc, md)
        })
        .collect()
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Array1<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = Array1::zeros(xs.len());
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(SlimError::Config(format!(
            "spearman needs two equal-length series of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (rx.mean().unwrap_or(0.0), ry.mean().unwrap_or(0.0));
    let (dx, dy) = (rx - mx, ry - my);
    let denom = (dx.dot(&dx) * dy.dot(&dy)).sqrt();
    if denom == 0.0 {
        return Err(SlimError::Numeric {
            op: "spearman",
            detail: "a series is constant".into(),
        });
    }
    Ok(dx.dot(&dy) / denom)
}
