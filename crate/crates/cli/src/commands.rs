use std::fmt::Write as _;

use anyhow::anyhow;
use ndarray::{Array1, Array2};
use serde::Serialize;
use slim_core::coherence::{
    coherence_csv, empirical_coherence_sweep, spearman, sweep_means, theorem1_bound_from_ratio,
    BoundValue, MixtureSpec,
};
use slim_core::dataset::make_folds;
use slim_core::grad::{registered_ops, GradCheckReport};
use slim_core::model::{
    inspect_graph, joint_loss_grad_case, prepare_dataset, PreparedGraph, SavedModel,
};
use slim_core::train::{cross_validate, sweep_csv, sweep_k, train, EpochMetrics, Split};
use slim_core::{load_tu_dataset, DatasetBundle, Execution, SubstructureConfig, TrainConfig};

use crate::args::{
    parse_list, CoherenceArgs, CvArgs, GlobalArgs, GradcheckArgs, InspectArgs, ModelArgs, SweepArgs,
};
use crate::exit::{Failure, Outcome};
use crate::manifest::Run;

/// Everything a command needs besides its own arguments.
pub struct Context<'a> {
    pub global: &'a GlobalArgs,
    /// The fully resolved command line, recorded in the manifest.
    pub resolved: serde_json::Value,
}

impl Context<'_> {
    fn execution(&self) -> Execution {
        if self.global.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    fn start(&self, command: &str, dataset: Option<&str>) -> Outcome<Run> {
        Run::start(
            &self.global.out,
            command,
            self.resolved.clone(),
            self.global.seed,
            dataset.map(str::to_string),
        )
    }

    fn load(&self, dataset: &str) -> Outcome<DatasetBundle> {
        let bundle = load_tu_dataset(&self.global.data_dir, dataset)?;
        log::info!(
            "{}: {} graphs, {} classes, {} node labels",
            bundle.name,
            bundle.len(),
            bundle.class_count,
            bundle.node_label_count
        );
        Ok(bundle)
    }
}

pub fn train_config(a: &ModelArgs, ctx: &Context<'_>) -> Outcome<TrainConfig> {
    let cfg = TrainConfig {
        substructure: SubstructureConfig {
            hops: a.hops,
            variant: a.variant,
            layer_decay: a.layer_decay,
        },
        landmarks: a.k,
        latent: a.latent,
        hidden: a.hidden,
        activation: a.activation,
        features: a.features,
        optimizer: a.optimizer,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lambda_embed: a.lambda_embed,
        lambda_cluster: a.lambda_cluster,
        semi_supervised: a.semi_supervised,
        seed: ctx.global.seed,
        execution: ctx.execution(),
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn check_folds(folds: usize) -> Outcome {
    if folds < 2 {
        return Err(Failure::Config(anyhow!(
            "--folds must be at least 2, got {folds}"
        )));
    }
    Ok(())
}

fn jsonl(metrics: &[EpochMetrics]) -> Outcome<String> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).map_err(|e| Failure::Check(e.into()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn cv(ctx: &Context<'_>, a: &CvArgs) -> Outcome {
    let cfg = train_config(&a.model, ctx)?;
    check_folds(a.folds)?;
    let bundle = ctx.load(&a.model.dataset)?;
    let plan = make_folds(&bundle, a.folds, cfg.seed)?;
    let mut run = ctx.start("cv", Some(&bundle.name))?;
    let graphs = prepare_dataset(&bundle, &cfg.substructure, cfg.execution)?;
    let out = cross_validate(
        &graphs,
        &cfg,
        &plan,
        bundle.node_label_count,
        bundle.class_count,
    )?;
    run.emit_json("cv_result.json", &out.result)?;
    run.emit("epochs.jsonl", &jsonl(&out.metrics)?)?;
    println!(
        "{}: {:.4} ± {:.4} (epoch {}, {} folds)",
        bundle.name, out.result.mean, out.result.std, out.result.selected_epoch, a.folds
    );
    run.finish()
}

pub fn train_model(ctx: &Context<'_>, a: &ModelArgs) -> Outcome {
    let cfg = train_config(a, ctx)?;
    let bundle = ctx.load(&a.dataset)?;
    let mut run = ctx.start("train", Some(&bundle.name))?;
    let graphs = prepare_dataset(&bundle, &cfg.substructure, cfg.execution)?;
    let split = Split {
        train: (0..graphs.len()).collect(),
        ..Split::default()
    };
    let out = train(
        &graphs,
        &split,
        &cfg,
        bundle.node_label_count,
        bundle.class_count,
        None,
    )?;
    let path = run.path("model.json");
    SavedModel::from_state(&out.state).save(&path)?;
    run.record(path.clone())?;
    run.emit("epochs.jsonl", &jsonl(&out.metrics)?)?;
    if let Some(last) = out.metrics.last() {
        println!(
            "{}: trained {} epochs, loss {:.4}, train accuracy {:.4}; model saved to {}",
            bundle.name,
            last.epoch,
            last.train_loss,
            last.train_accuracy,
            path.display()
        );
    }
    run.finish()
}

pub fn sweep(ctx: &Context<'_>, a: &SweepArgs) -> Outcome {
    let cfg = train_config(&a.model, ctx)?;
    check_folds(a.folds)?;
    let ks = parse_list(&a.ks).map_err(|e| Failure::Config(anyhow!(e)))?;
    let ks = slim_core::train::normalize_k_list(&ks)?;
    let bundle = ctx.load(&a.model.dataset)?;
    let plan = make_folds(&bundle, a.folds, cfg.seed)?;
    let mut run = ctx.start("sweep-k", Some(&bundle.name))?;
    let graphs = prepare_dataset(&bundle, &cfg.substructure, cfg.execution)?;
    let rows = sweep_k(
        &graphs,
        &cfg,
        &plan,
        &ks,
        bundle.node_label_count,
        bundle.class_count,
    )?;
    let csv = sweep_csv(&rows);
    run.emit("sweep_k.csv", &csv)?;
    print!("{csv}");
    run.finish()
}

#[derive(Serialize)]
struct KSummary {
    k: usize,
    mean_coherence: Option<f64>,
    mean_distortion: f64,
}

#[derive(Serialize)]
struct CoherenceSummary {
    spearman: Option<f64>,
    distortion_non_increasing: bool,
    per_k: Vec<KSummary>,
}

pub fn coherence(ctx: &Context<'_>, a: &CoherenceArgs) -> Outcome {
    if a.analytic_only {
        match theorem1_bound_from_ratio(a.d, a.big_k, a.cdcp_over_umax2)? {
            BoundValue::Value(v) => println!("{v:.6}"),
            BoundValue::Vacuous(why) => println!("vacuous: {why}"),
        }
        return Ok(());
    }
    let ks = parse_list(&a.ks).map_err(|e| Failure::Config(anyhow!(e)))?;
    if ks.is_empty() || a.seeds == 0 {
        return Err(Failure::Config(anyhow!(
            "the sweep needs at least one K and one seed"
        )));
    }
    let spec = MixtureSpec {
        scale: a.scale,
        points: a.points,
        ..MixtureSpec::default()
    };
    let seeds: Vec<u64> = (ctx.global.seed..ctx.global.seed + a.seeds).collect();
    let mut run = ctx.start("coherence", None)?;
    let rows = empirical_coherence_sweep(&spec, &ks, &seeds, ctx.execution())?;
    run.emit("coherence.csv", &coherence_csv(&rows))?;

    let means = sweep_means(&rows);
    let defined: Vec<(f64, f64)> = means
        .iter()
        .filter_map(|&(k, c, _)| c.map(|c| (k as f64, c)))
        .collect();
    let rho = if defined.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = defined.into_iter().unzip();
        Some(spearman(&x, &y)?)
    } else {
        None
    };
    let mut by_k = means.clone();
    by_k.sort_by_key(|m| m.0);
    let non_increasing = by_k.windows(2).all(|w| w[1].2 <= w[0].2);
    let summary = CoherenceSummary {
        spearman: rho,
        distortion_non_increasing: non_increasing,
        per_k: means
            .iter()
            .map(|&(k, c, s)| KSummary {
                k,
                mean_coherence: c,
                mean_distortion: s,
            })
            .collect(),
    };
    run.emit_json("coherence_summary.json", &summary)?;

    println!("{:>6}  {:>10}  {:>10}", "K", "coherence", "distortion");
    for m in &summary.per_k {
        let c = m
            .mean_coherence
            .map_or_else(|| "-".to_string(), |c| format!("{c:.4}"));
        println!("{:>6}  {:>10}  {:>10.4}", m.k, c, m.mean_distortion);
    }
    match rho {
        Some(r) => println!("spearman(K, coherence) = {r:.4}"),
        None => {
            println!("spearman(K, coherence) undefined (fewer than two K values with coherence)")
        }
    }
    run.finish()
}

#[derive(Serialize)]
struct GradcheckSummary {
    step: f64,
    tolerance: f64,
    passed: bool,
    results: Vec<GradCheckReport>,
}

pub fn gradcheck(ctx: &Context<'_>, a: &GradcheckArgs) -> Outcome {
    let mut cases = registered_ops(ctx.global.seed);
    cases.push(joint_loss_grad_case(ctx.global.seed));
    let results: Vec<GradCheckReport> = ctx
        .execution()
        .try_map(&cases, |c| c.run(a.step, a.tolerance))?;
    let summary = GradcheckSummary {
        step: a.step,
        tolerance: a.tolerance,
        passed: results.iter().all(|r| r.passed),
        results,
    };
    let mut run = ctx.start("gradcheck", None)?;
    run.emit_json("gradcheck.json", &summary)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).map_err(|e| Failure::Check(e.into()))?
    );
    run.finish()?;
    if summary.passed {
        return Ok(());
    }
    let failing: Vec<String> = summary
        .results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({:.3e})", r.op_name, r.max_relative_error))
        .collect();
    Err(Failure::Check(anyhow!(
        "{} op(s) above tolerance {:e}: {}",
        failing.len(),
        a.tolerance,
        failing.join(", ")
    )))
}

fn matrix_csv(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn vector_csv(v: &Array1<f64>) -> String {
    v.iter().fold(String::new(), |mut s, x| {
        let _ = writeln!(s, "{x}");
        s
    })
}

pub fn inspect(ctx: &Context<'_>, a: &InspectArgs) -> Outcome {
    let saved = SavedModel::load(&a.model)?;
    let cfg = saved.config.clone();
    let node_types = saved.shape.node_types;
    let params = saved.into_params()?;
    let bundle = ctx.load(&a.dataset)?;
    let graph = bundle.graphs.get(a.graph).ok_or_else(|| {
        Failure::Config(anyhow!(
            "graph index {} out of range for {} graphs",
            a.graph,
            bundle.len()
        ))
    })?;
    let prepared = PreparedGraph::new(graph, node_types, &cfg.substructure)?;
    let ins = inspect_graph(&params, &cfg, &prepared)?;
    let mut run = ctx.start("inspect", Some(&bundle.name))?;
    let prefix = format!("graph_{}", a.graph);
    run.emit(
        &format!("{prefix}/W.csv"),
        &matrix_csv(&ins.assignment.values),
    )?;
    run.emit(&format!("{prefix}/p.csv"), &vector_csv(&ins.pooled.p))?;
    run.emit(&format!("{prefix}/M.csv"), &matrix_csv(&ins.pooled.m))?;
    run.emit(&format!("{prefix}/C.csv"), &matrix_csv(&ins.pooled.c))?;
    run.emit(
        &format!("{prefix}/C_norm.csv"),
        &matrix_csv(&ins.pooled.c_norm),
    )?;
    if a.with_z {
        run.emit(&format!("{prefix}/Z.csv"), &matrix_csv(&prepared.z))?;
    }
    let logits = ins.logits.row(0);
    let predicted = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0;
    println!(
        "graph {}: {} nodes, {} edges, label {}, predicted {}",
        a.graph,
        graph.node_count(),
        graph.edge_count(),
        graph.class_label(),
        predicted
    );
    run.finish()
}
