//! Joint training, cross-validation and structural-resolution sweeps.

use log::{debug, info, warn};
use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FoldPlan;
use crate::error::{Result, SlimError};
use crate::landmarks::{init_landmarks, TargetMatrix};
use crate::model::{
    graph_objective, joint_loss_and_gradients, predict_many, target_for, BatchItem, JointLoss,
    ModelState, PreparedGraph, TermWeights, TrainConfig,
};

/// Losses above this magnitude abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Which graphs a run trains on and evaluates against.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    /// Graphs that contribute only the unsupervised terms; their labels are never read.
    pub unlabeled: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub fold: Option<usize>,
    /// Mean joint loss over the epoch's mini-batches.
    pub train_loss: f64,
    pub cross_entropy: f64,
    pub cooccurrence: f64,
    pub cluster: f64,
    /// Accuracy on the labeled training graphs measured during the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub metrics: Vec<EpochMetrics>,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Stacks every node embedding of the given graphs under the current encoder.
fn stacked_embeddings(
    state: &ModelState,
    graphs: &[PreparedGraph],
    ids: &[usize],
) -> Result<Array2<f64>> {
    let cfg = &state.config;
    let parts = cfg.execution.try_map(ids, |&i| {
        crate::model::inspect_embedding(&state.params, cfg, &graphs[i])
    })?;
    let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| SlimError::Numeric {
        op: "stacked_embeddings",
        detail: e.to_string(),
    })
}

pub fn accuracy(state: &ModelState, graphs: &[PreparedGraph], ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return Ok(0.0);
    }
    let selected: Vec<&PreparedGraph> = ids.iter().map(|&i| &graphs[i]).collect();
    let predicted = predict_many(&state.params, &state.config, &selected)?;
    let hits = predicted
        .iter()
        .zip(&selected)
        .filter(|(p, g)| **p == g.label)
        .count();
    Ok(hits as f64 / ids.len() as f64)
}

fn divergence(
    state: &ModelState,
    batch: &[BatchItem<'_>],
    epoch: usize,
    loss: &JointLoss,
) -> SlimError {
    let cfg = &state.config;
    let weights = TermWeights {
        cross_entropy: 1.0,
        cooccurrence: 1.0,
        cluster: 1.0,
    };
    // find the worst graph for the report
    let mut worst = (batch[0].id, f64::NEG_INFINITY, String::new());
    for item in batch {
        let (detail, score) = match graph_objective(
            &state.params,
            cfg,
            item.graph,
            item.label,
            item.target,
            weights,
            false,
        ) {
            Ok((t, total, _)) => (
                format!(
                    "cross_entropy={:?} cooccurrence={} cluster={}",
                    t.cross_entropy, t.cooccurrence, t.cluster
                ),
                if total.is_finite() {
                    total
                } else {
                    f64::INFINITY
                },
            ),
            Err(e) => (e.to_string(), f64::INFINITY),
        };
        if score > worst.1 {
            worst = (item.id, score, detail);
        }
    }
    SlimError::Divergence {
        epoch,
        graph: worst.0,
        detail: format!(
            "batch loss {} (cross_entropy={} cooccurrence={} cluster={}); worst graph terms: {}",
            loss.total, loss.cross_entropy, loss.cooccurrence, loss.cluster, worst.2
        ),
    }
}

/// Trains one model. Landmarks are seeded by k-means on the initial
/// embeddings of every participating graph; the sharpened targets are
/// refreshed at the start of each epoch.
pub fn train(
    graphs: &[PreparedGraph],
    split: &Split,
    cfg: &TrainConfig,
    node_types: usize,
    classes: usize,
    fold: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(SlimError::Config("training split is empty".into()));
    }
    if let Some(&bad) = split
        .train
        .iter()
        .chain(&split.unlabeled)
        .chain(&split.validation)
        .find(|&&i| i >= graphs.len())
    {
        return Err(SlimError::Config(format!(
            "graph index {bad} out of range for {} graphs",
            graphs.len()
        )));
    }
    let seed = mix_seed(cfg.seed, fold.map_or(0, |f| f as u64 + 1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ModelState::new(&mut rng, cfg, node_types, classes);

    let unlabeled: &[usize] = if cfg.semi_supervised {
        &split.unlabeled
    } else {
        &[]
    };
    let participants: Vec<(usize, bool)> = split
        .train
        .iter()
        .map(|&i| (i, true))
        .chain(unlabeled.iter().map(|&i| (i, false)))
        .collect();
    let ids: Vec<usize> = participants.iter().map(|p| p.0).collect();

    let h0 = stacked_embeddings(&state, graphs, &ids)?;
    state.params.landmarks.u = init_landmarks(&h0, cfg.landmarks, mix_seed(seed, 0x1a2d))?.u;
    drop(h0);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..participants.len()).collect();
    for epoch in 1..=cfg.epochs {
        let targets: Vec<TargetMatrix> = cfg.execution.try_map(&ids, |&i| {
            target_for(&state.params, &state.config, &graphs[i])
        })?;
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 4];
        let (mut batches, mut labeled, mut correct) = (0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&slot| {
                    let (id, has_label) = participants[slot];
                    BatchItem {
                        graph: &graphs[id],
                        label: has_label.then(|| graphs[id].label),
                        target: &targets[slot],
                        id,
                    }
                })
                .collect();
            let (loss, grads) =
                joint_loss_and_gradients(&state.params, &state.config, &batch, true)?;
            if !loss.total.is_finite() || loss.total.abs() > DIVERGENCE_LIMIT {
                return Err(divergence(&state, &batch, epoch, &loss));
            }
            let grads = grads.expect("gradients requested");
            state.optimizer.step(&mut state.params, &grads);
            if !state.params.is_finite() {
                return Err(SlimError::Divergence {
                    epoch,
                    graph: batch[0].id,
                    detail: "non-finite parameters after optimizer step".into(),
                });
            }
            sums[0] += loss.total;
            sums[1] += loss.cross_entropy;
            sums[2] += loss.cooccurrence;
            sums[3] += loss.cluster;
            batches += 1;
            labeled += loss.labeled;
            correct += loss.correct;
        }
        let val_accuracy = if split.validation.is_empty() {
            None
        } else {
            Some(accuracy(&state, graphs, &split.validation)?)
        };
        let m = EpochMetrics {
            epoch,
            fold,
            train_loss: sums[0] / batches as f64,
            cross_entropy: sums[1] / batches as f64,
            cooccurrence: sums[2] / batches as f64,
            cluster: sums[3] / batches as f64,
            train_accuracy: if labeled > 0 {
                correct as f64 / labeled as f64
            } else {
                0.0
            },
            val_accuracy,
        };
        debug!(
            "fold {:?} epoch {epoch}: loss {:.5} train acc {:.4} val acc {:?}",
            fold, m.train_loss, m.train_accuracy, m.val_accuracy
        );
        metrics.push(m);
    }
    Ok(TrainOutcome { state, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    /// Validation accuracy of each fold at the selected epoch.
    pub per_fold: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `per_fold`.
    pub std: f64,
    /// 1-based epoch maximising the fold-averaged validation accuracy.
    pub selected_epoch: usize,
    /// Fold-averaged validation accuracy per epoch.
    pub curve: Vec<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    // shifted by the first value so identical inputs give an exact mean
    let base = xs[0];
    let mean = base + xs.iter().map(|x| x - base).sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Reduces per-fold validation curves (`curves[fold][epoch]`) to a result.
/// Ties in the averaged curve resolve to the earliest epoch.
pub fn summarize_folds(curves: &[Vec<f64>]) -> Result<CvResult> {
    let epochs = curves.first().map_or(0, Vec::len);
    if epochs == 0 || curves.iter().any(|c| c.len() != epochs) {
        return Err(SlimError::Config(
            "fold curves must be non-empty and of equal length".into(),
        ));
    }
    let folds = curves.len() as f64;
    let curve: Vec<f64> = (0..epochs)
        .map(|e| curves.iter().map(|c| c[e]).sum::<f64>() / folds)
        .collect();
    let best = crate::model::argmax(curve.iter().copied());
    let per_fold: Vec<f64> = curves.iter().map(|c| c[best]).collect();
    let (mean, std) = mean_std(&per_fold);
    Ok(CvResult {
        per_fold,
        mean,
        std,
        selected_epoch: best + 1,
        curve,
    })
}

/// Everything a cross-validation run produced.
#[derive(Debug, Clone)]
pub struct CvRun {
    pub result: CvResult,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains one model per fold (holding that fold out for validation) and
/// selects the epoch with the best fold-averaged validation accuracy.
/// In semi-supervised mode the held-out fold joins training unlabeled.
pub fn cross_validate(
    graphs: &[PreparedGraph],
    cfg: &TrainConfig,
    plan: &FoldPlan,
    node_types: usize,
    classes: usize,
) -> Result<CvRun> {
    cfg.validate()?;
    if plan.assignments.len() != graphs.len() {
        return Err(SlimError::Config(format!(
            "fold plan covers {} graphs but the dataset has {}",
            plan.assignments.len(),
            graphs.len()
        )));
    }
    if cfg.epochs == 0 {
        return Err(SlimError::Config(
            "cross-validation needs at least one epoch".into(),
        ));
    }
    let folds: Vec<usize> = (0..plan.fold_count).collect();
    let outcomes = cfg.execution.try_map(&folds, |&f| {
        let held_out = plan.fold_members(f);
        let split = Split {
            train: plan.training_members(f),
            unlabeled: held_out.clone(),
            validation: held_out,
        };
        let out = train(graphs, &split, cfg, node_types, classes, Some(f))?;
        info!(
            "fold {f}: final val acc {:.4}",
            out.metrics
                .last()
                .and_then(|m| m.val_accuracy)
                .unwrap_or(f64::NAN)
        );
        Ok::<_, SlimError>(out.metrics)
    })?;
    let curves: Vec<Vec<f64>> = outcomes
        .iter()
        .map(|ms| ms.iter().map(|m| m.val_accuracy.unwrap_or(0.0)).collect())
        .collect();
    let result = summarize_folds(&curves)?;
    Ok(CvRun {
        result,
        metrics: outcomes.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub selected_epoch: usize,
}

/// Sorted, deduplicated landmark counts. Duplicates are dropped with a warning.
pub fn normalize_k_list(ks: &[usize]) -> Result<Vec<usize>> {
    if ks.is_empty() {
        return Err(SlimError::Config("K list is empty".into()));
    }
    if ks.contains(&0) {
        return Err(SlimError::Config("K values must be at least 1".into()));
    }
    let mut sorted = ks.to_vec();
    sorted.sort_unstable();
    let before = sorted.len();
    sorted.dedup();
    if sorted.len() != before {
        warn!("dropped {} duplicate K value(s)", before - sorted.len());
    }
    Ok(sorted)
}

pub fn sweep_k(
    graphs: &[PreparedGraph],
    cfg: &TrainConfig,
    plan: &FoldPlan,
    ks: &[usize],
    node_types: usize,
    classes: usize,
) -> Result<Vec<SweepRow>> {
    let ks = normalize_k_list(ks)?;
    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let cfg = TrainConfig {
            landmarks: k,
            ..cfg.clone()
        };
        let run = cross_validate(graphs, &cfg, plan, node_types, classes)?;
        info!("K={k}: {:.4} ± {:.4}", run.result.mean, run.result.std);
        rows.push(SweepRow {
            k,
            mean: run.result.mean,
            std: run.result.std,
            selected_epoch: run.result.selected_epoch,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("K,mean_acc,std_acc\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.k, r.mean, r.std));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_folds_have_zero_std() {
        let r = summarize_folds(&[vec![0.5, 0.7], vec![0.5, 0.7], vec![0.5, 0.7]]).unwrap();
        assert_eq!(r.std, 0.0);
        assert_eq!(r.selected_epoch, 2);
        assert_eq!(r.mean, 0.7);
    }

    #[test]
    fn selection_uses_fold_average() {
        // fold 0 peaks at epoch 1, but the average peaks at epoch 2
        let r = summarize_folds(&[vec![0.9, 0.8, 0.1], vec![0.2, 0.6, 0.5]]).unwrap();
        assert_eq!(r.selected_epoch, 2);
        assert_eq!(r.per_fold, vec![0.8, 0.6]);
        let (m, s) = mean_std(&r.per_fold);
        assert!((r.mean - m).abs() < 1e-12 && (r.std - s).abs() < 1e-12);
        assert!((r.std - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ragged_curves_are_rejected() {
        assert!(summarize_folds(&[vec![0.1], vec![0.1, 0.2]]).is_err());
        assert!(summarize_folds(&[]).is_err());
    }

    #[test]
    fn k_list_is_sorted_and_deduplicated() {
        assert_eq!(
            normalize_k_list(&[100, 2, 100, 10]).unwrap(),
            vec![2, 10, 100]
        );
        assert!(normalize_k_list(&[]).is_err());
        assert!(normalize_k_list(&[0, 3]).is_err());
        let csv = sweep_csv(&[SweepRow {
            k: 2,
            mean: 0.5,
            std: 0.0,
            selected_epoch: 1,
        }]);
        assert_eq!(csv, "K,mean_acc,std_acc\n2,0.5,0\n");
    }
}
