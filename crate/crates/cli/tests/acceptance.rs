//! Acceptance suite. Prints one PASS or FAIL line per criterion and always
//! exits successfully so that a failing criterion is reported, not hidden
//! behind a test-harness abort.
//!
//! Environment:
//! - `SLIM_ACCEPTANCE_ONLY=3,4` runs a subset (the rest print SKIP).
//! - `SLIM_ACCEPTANCE_K2000=1` attempts the K=2000 cross-validation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;
use slim_core::coherence::{
    recovery_support_bound, theorem1_bound_from_ratio, unit_ball_volume, BoundValue, RecoveryBound,
};
use slim_core::dataset::{one_hot_features, write_tu_dataset};
use slim_core::embedding::{encode, Activation, EncoderParams};
use slim_core::landmarks::{assign, init_landmarks, LandmarkSet};
use slim_core::pooling::{pool, PooledFeatures};
use slim_core::substructure::build_substructures;
use slim_core::{load_tu_dataset, Graph, SubstructureConfig};

const MUTAG_FLOOR: f64 = 0.85;
const MUTAG_BUDGET: Duration = Duration::from_secs(15 * 60);

type Verdict = Result<String, String>;

fn data_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn slim(out: &Path, args: &[&str]) -> Result<std::process::Output, String> {
    let root = data_root();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_slim"));
    cmd.arg("--data-dir")
        .arg(&root)
        .arg("--out")
        .arg(out)
        .args(args);
    cmd.output().map_err(|e| format!("cannot launch slim: {e}"))
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

struct CvOutcome {
    mean: f64,
    std: f64,
    epoch: u64,
    elapsed: Duration,
}

/// Runs `slim cv` on MUTAG on one worker thread.
fn mutag_cv(out: &Path, k: usize) -> Result<CvOutcome, String> {
    let k = k.to_string();
    let started = Instant::now();
    let o = slim(
        out,
        &[
            "--jobs",
            "1",
            "cv",
            "--dataset",
            "MUTAG",
            "--k",
            &k,
            "--hops",
            "3",
        ],
    )?;
    let elapsed = started.elapsed();
    if !o.status.success() {
        return Err(format!(
            "slim cv --k {k} exited with {}: {}",
            o.status,
            String::from_utf8_lossy(&o.stderr).trim()
        ));
    }
    let r = read_json(&out.join("cv_result.json"))?;
    let num = |key: &str| {
        r[key]
            .as_f64()
            .ok_or_else(|| format!("cv_result.json lacks {key}"))
    };
    Ok(CvOutcome {
        mean: num("mean")?,
        std: num("std")?,
        epoch: r["selected_epoch"].as_u64().unwrap_or(0),
        elapsed,
    })
}

struct MutagRuns {
    scratch: tempfile::TempDir,
    k100: Option<Result<CvOutcome, String>>,
}

impl MutagRuns {
    fn k100(&mut self) -> Result<&CvOutcome, String> {
        if self.k100.is_none() {
            self.k100 = Some(mutag_cv(&self.scratch.path().join("k100"), 100));
        }
        self.k100.as_ref().unwrap().as_ref().map_err(Clone::clone)
    }
}

fn criterion_1(runs: &mut MutagRuns) -> Verdict {
    let r = runs.k100()?;
    let detail = format!(
        "10-fold mean {:.4} ± {:.4} at epoch {}, wall-clock {:.0}s (need >= {MUTAG_FLOOR} in < {}s)",
        r.mean,
        r.std,
        r.epoch,
        r.elapsed.as_secs_f64(),
        MUTAG_BUDGET.as_secs()
    );
    if r.mean >= MUTAG_FLOOR && r.elapsed < MUTAG_BUDGET {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Bytes for one dense copy of the classifier's hidden layer at K landmarks.
fn hidden_layer_bytes(k: usize) -> f64 {
    (k * k * 64 * std::mem::size_of::<f64>()) as f64
}

fn criterion_2(runs: &mut MutagRuns) -> Verdict {
    let mid = runs.k100()?.mean;
    let low = mutag_cv(&runs.scratch.path().join("k2"), 2)?;
    let mut detail = format!("K=2 {:.4}, K=100 {mid:.4}", low.mean);
    let mut ok = mid > low.mean;
    if std::env::var_os("SLIM_ACCEPTANCE_K2000").is_some() {
        let high = mutag_cv(&runs.scratch.path().join("k2000"), 2000)?;
        detail.push_str(&format!(", K=2000 {:.4}", high.mean));
        ok &= mid > high.mean;
    } else {
        detail.push_str(&format!(
            ", K=2000 not run: its classifier input has {} features, so one copy of the hidden \
             layer is {:.1} GB and parameters, gradients and optimizer state need over {:.0} GB \
             (set SLIM_ACCEPTANCE_K2000=1 to attempt it)",
            2000 * 2000,
            hidden_layer_bytes(2000) / 1e9,
            3.0 * hidden_layer_bytes(2000) / 1e9
        ));
        ok = false;
    }
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_3(scratch: &Path) -> Verdict {
    let out = scratch.join("coherence");
    let o = slim(
        &out,
        &[
            "coherence",
            "--ks",
            "2,4,8,16,32,64,128,256,512",
            "--seeds",
            "10",
        ],
    )?;
    if !o.status.success() {
        return Err(format!(
            "slim coherence failed: {}",
            String::from_utf8_lossy(&o.stderr).trim()
        ));
    }
    let s = read_json(&out.join("coherence_summary.json"))?;
    let rho = s["spearman"].as_f64().ok_or("spearman undefined")?;
    let monotone = s["distortion_non_increasing"].as_bool() == Some(true);
    let detail = format!("spearman {rho:.4} (need >= 0.9), distortion non-increasing: {monotone}");
    if rho >= 0.9 && monotone {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_4(scratch: &Path) -> Verdict {
    let out = scratch.join("gradcheck");
    let o = slim(
        &out,
        &["gradcheck", "--step", "1e-5", "--tolerance", "1e-4"],
    )?;
    let s = read_json(&out.join("gradcheck.json"))?;
    let results = s["results"]
        .as_array()
        .ok_or("gradcheck.json lacks results")?;
    let worst = results
        .iter()
        .filter_map(|r| Some((r["op_name"].as_str()?, r["max_relative_error"].as_f64()?)))
        .fold(("", 0.0f64), |w, r| if r.1 > w.1 { r } else { w });
    let failing: Vec<&str> = results
        .iter()
        .filter(|r| r["passed"] != true)
        .filter_map(|r| r["op_name"].as_str())
        .collect();
    let detail = format!(
        "{} checks (ops plus joint loss), worst {} at {:.2e}",
        results.len(),
        worst.0,
        worst.1
    );
    if o.status.success() && failing.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing: {failing:?}"))
    }
}

fn pooled(
    g: &Graph,
    encoder: &EncoderParams,
    landmarks: &LandmarkSet,
    types: usize,
) -> Result<PooledFeatures, String> {
    let x = one_hot_features(g, types).map_err(|e| e.to_string())?;
    let z =
        build_substructures(g, &x, &SubstructureConfig::default()).map_err(|e| e.to_string())?;
    let h = encode(&z, encoder, Activation::Logistic).map_err(|e| e.to_string())?;
    let w = assign(&h, landmarks).map_err(|e| e.to_string())?;
    for (i, row) in w.values.rows().into_iter().enumerate() {
        if (row.sum() - 1.0).abs() > 1e-9 {
            return Err(format!("W row {i} sums to {}", row.sum()));
        }
    }
    pool(&x, &w, &g.adjacency_matrix()).map_err(|e| e.to_string())
}

fn max_abs_diff<'a>(
    a: impl IntoIterator<Item = &'a f64>,
    b: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    a.into_iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn criterion_5() -> Verdict {
    const TYPES: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let width = SubstructureConfig::default().feature_width(TYPES);
    let encoder = EncoderParams::init(&mut rng, width, width, 3);
    let landmarks = LandmarkSet::new(Array2::from_shape_fn((6, 3), |_| rng.gen_range(0.0..1.0)));
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n = rng.gen_range(1..=25);
        let density = rng.gen_range(0.05..0.6);
        let g = Graph::random(&mut rng, n, density, TYPES, 0);
        let pf = pooled(&g, &encoder, &landmarks, TYPES).map_err(|e| format!("graph {i}: {e}"))?;
        if (pf.p.sum() - n as f64).abs() > 1e-6 {
            return Err(format!("graph {i}: sum p = {} for n = {n}", pf.p.sum()));
        }
        if (pf.c.sum() - 2.0 * g.edge_count() as f64).abs() > 1e-6 {
            return Err(format!(
                "graph {i}: sum C = {} for |E| = {}",
                pf.c.sum(),
                g.edge_count()
            ));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let q = pooled(&g.permuted(&perm), &encoder, &landmarks, TYPES)
            .map_err(|e| format!("graph {i}: {e}"))?;
        let d = [
            max_abs_diff(&pf.p, &q.p),
            max_abs_diff(&pf.m, &q.m),
            max_abs_diff(&pf.c, &q.c),
            max_abs_diff(&pf.c_norm, &q.c_norm),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        if d > 1e-6 {
            return Err(format!(
                "graph {i}: permutation moved pooled features by {d:.2e}"
            ));
        }
        worst = worst.max(d);
    }
    Ok(format!(
        "100 random graphs, largest permutation difference {worst:.2e}"
    ))
}

fn sse(points: &Array2<f64>, centroids: &Array2<f64>) -> f64 {
    points
        .rows()
        .into_iter()
        .map(|p| {
            centroids
                .rows()
                .into_iter()
                .map(|c| (&p - &c).mapv(|v| v * v).sum())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

fn optimal_two_means_cost(points: &Array2<f64>) -> f64 {
    let n = points.nrows();
    let mean =
        |idx: &[usize]| -> Array1<f64> { points.select(Axis(0), idx).mean_axis(Axis(0)).unwrap() };
    (0u32..(1 << (n - 1)))
        .filter_map(|mask| {
            let (b, a): (Vec<usize>, Vec<usize>) =
                (0..n).partition(|&i| i > 0 && mask & (1 << (i - 1)) != 0);
            if b.is_empty() {
                return None;
            }
            let mut c = Array2::zeros((2, points.ncols()));
            c.row_mut(0).assign(&mean(&a));
            c.row_mut(1).assign(&mean(&b));
            Some(sse(points, &c))
        })
        .fold(f64::INFINITY, f64::min)
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for case in 0..40 {
        let n = rng.gen_range(4..=12);
        let split = rng.gen_range(2..n - 1);
        let points = Array2::from_shape_fn((n, 2), |(i, _)| {
            let offset = if i < split { 0.0 } else { 4.0 };
            offset + 0.3 * rng.sample::<f64, _>(StandardNormal)
        });
        let best = optimal_two_means_cost(&points);
        let lm = init_landmarks(&points, 2, case).map_err(|e| e.to_string())?;
        let gap = (sse(&points, &lm.u) - best).abs();
        if gap > 1e-6 {
            return Err(format!(
                "case {case} ({n} points): distortion off the optimum by {gap:.2e}"
            ));
        }
        worst = worst.max(gap);
    }
    Ok(format!(
        "40 instances of 4 to 12 points, largest gap {worst:.2e}"
    ))
}

fn criterion_7(scratch: &Path) -> Verdict {
    let b = load_tu_dataset(data_root(), "MUTAG").map_err(|e| e.to_string())?;
    let shape = (b.len(), b.class_count, b.node_label_count);
    if shape != (188, 2, 7) {
        return Err(format!(
            "MUTAG loaded as {shape:?} (graphs, classes, node labels)"
        ));
    }
    let dir = scratch.join("roundtrip");
    write_tu_dataset(&b, &dir).map_err(|e| e.to_string())?;
    let again = load_tu_dataset(&dir, "MUTAG").map_err(|e| e.to_string())?;
    if again.graphs != b.graphs
        || again.class_count != b.class_count
        || again.node_label_count != b.node_label_count
    {
        return Err("MUTAG changed after a write and reload".into());
    }
    Ok("188 graphs, 2 classes, 7 node labels; write and reload is lossless".into())
}

fn criterion_8() -> Verdict {
    let v2 = unit_ball_volume(2);
    let v3 = unit_ball_volume(3);
    let bound = theorem1_bound_from_ratio(2, 8, 1.0).map_err(|e| e.to_string())?;
    let recovery = recovery_support_bound(0.2).map_err(|e| e.to_string())?;
    let detail = format!(
        "V_2 {v2:.12}, V_3 {v3:.12}, bound(d=2, K=8) {bound:?}, recovery(0.2) {recovery:?}"
    );
    let ok = (v2 - PI).abs() < 1e-12
        && (v3 - 4.0 * PI / 3.0).abs() < 1e-12
        && matches!(bound, BoundValue::Value(v) if (v + 1.1213).abs() < 1e-3)
        && recovery == RecoveryBound::Finite(3.0);
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("SLIM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let scratch = tempfile::tempdir().expect("scratch directory");
    let mut runs = MutagRuns {
        scratch: tempfile::tempdir().expect("scratch directory"),
        k100: None,
    };
    let names = [
        "MUTAG reproduction",
        "accuracy peaks at intermediate K",
        "coherence grows with K",
        "gradient suite",
        "pooling invariants",
        "landmark oracle",
        "parser fidelity",
        "analytic spot checks",
    ];
    let (mut passed, mut failed) = (0, 0);
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            println!("SKIP {n} {name}");
            continue;
        }
        let verdict = match n {
            1 => criterion_1(&mut runs),
            2 => criterion_2(&mut runs),
            3 => criterion_3(scratch.path()),
            4 => criterion_4(scratch.path()),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(scratch.path()),
            _ => criterion_8(),
        };
        match verdict {
            Ok(detail) => {
                passed += 1;
                println!("PASS {n} {name}: {detail}");
            }
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail}");
            }
        }
    }
    let skipped = names.len() - passed - failed;
    println!("acceptance: {passed} passed, {failed} failed, {skipped} skipped");
}
