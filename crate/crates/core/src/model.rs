//! Model configuration, parameters, the per-graph forward pass and the joint loss.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{one_hot_features, DatasetBundle, Graph};
use crate::embedding::{
    cooccurrence_loss_on_tape, encode_on_tape, scaled_uniform, Activation, EncoderParams,
    EncoderVars,
};
use crate::error::{Result, SlimError};
use crate::grad::{GradCheckCase, Tape, Var};
use crate::landmarks::{
    assign_on_tape, cluster_loss_on_tape, target_distribution, AssignmentMatrix, LandmarkSet,
    TargetMatrix,
};
use crate::parallel::Execution;
use crate::pooling::{feature_on_tape, pool_on_tape, FeatureSet, PoolVars, PooledFeatures};
use crate::substructure::{build_substructures, SubstructureConfig};

/// Encoder hidden width relative to the substructure width `D`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HiddenWidth {
    #[default]
    Same,
    Half,
    Double,
}

impl HiddenWidth {
    pub fn resolve(self, input_width: usize) -> usize {
        match self {
            HiddenWidth::Same => input_width,
            HiddenWidth::Half => (input_width / 2).max(1),
            HiddenWidth::Double => 2 * input_width,
        }
    }
}

impl std::str::FromStr for HiddenWidth {
    type Err = SlimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" | "d" | "D" => Ok(HiddenWidth::Same),
            "half" | "d/2" | "D/2" => Ok(HiddenWidth::Half),
            "double" | "2d" | "2D" => Ok(HiddenWidth::Double),
            _ => Err(SlimError::Config(format!(
                "unknown hidden width {s:?} (same, half, double)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
}

impl std::str::FromStr for OptimizerKind {
    type Err = SlimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            _ => Err(SlimError::Config(format!(
                "unknown optimizer {s:?} (sgd, adagrad)"
            ))),
        }
    }
}

/// Learning rates searched in the reference protocol.
pub const LEARNING_RATE_GRID: [f64; 5] = [1e-2, 5e-2, 1e-3, 5e-3, 1e-4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub substructure: SubstructureConfig,
    pub landmarks: usize,
    pub latent: usize,
    pub hidden: HiddenWidth,
    pub classifier_hidden: usize,
    pub activation: Activation,
    pub features: FeatureSet,
    pub dof: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_embed: f64,
    pub lambda_cluster: f64,
    pub semi_supervised: bool,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            substructure: SubstructureConfig::default(),
            landmarks: 100,
            latent: 32,
            hidden: HiddenWidth::Same,
            classifier_hidden: 64,
            activation: Activation::Logistic,
            features: FeatureSet::Interaction,
            dof: 1.0,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 5e-2,
            epochs: 300,
            batch_size: 32,
            lambda_embed: 0.01,
            lambda_cluster: 0.01,
            semi_supervised: false,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.substructure.validate()?;
        let fail = |msg: String| Err(SlimError::Config(msg));
        if self.landmarks == 0 {
            return fail("landmark count K must be at least 1".into());
        }
        if self.latent == 0 || self.classifier_hidden == 0 {
            return fail("layer widths must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        if !(self.lambda_embed >= 0.0 && self.lambda_cluster >= 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.dof > 0.0) {
            return fail(format!(
                "Student-t degrees of freedom must be positive, got {}",
                self.dof
            ));
        }
        Ok(())
    }
}

/// Fixed shapes of a model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub node_types: usize,
    pub input_width: usize,
    pub hidden: usize,
    pub latent: usize,
    pub landmarks: usize,
    pub feature_width: usize,
    pub classifier_hidden: usize,
    pub classes: usize,
}

impl ModelShape {
    pub fn new(cfg: &TrainConfig, node_types: usize, classes: usize) -> Self {
        let input_width = cfg.substructure.feature_width(node_types);
        ModelShape {
            node_types,
            input_width,
            hidden: cfg.hidden.resolve(input_width),
            latent: cfg.latent,
            landmarks: cfg.landmarks,
            feature_width: cfg.features.width(cfg.landmarks, node_types),
            classifier_hidden: cfg.classifier_hidden,
            classes,
        }
    }
}

/// Fully connected head: one tanh hidden layer then logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub w_hidden: Array2<f64>,
    pub b_hidden: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub encoder: EncoderParams,
    pub landmarks: LandmarkSet,
    pub classifier: ClassifierParams,
}

pub const PARAM_NAMES: [&str; 9] = [
    "encoder.t1",
    "encoder.b1",
    "encoder.t2",
    "encoder.b2",
    "landmarks",
    "classifier.w_hidden",
    "classifier.b_hidden",
    "classifier.w_out",
    "classifier.b_out",
];

impl Params {
    /// Scaled-uniform weights; landmarks start at zero until k-means runs.
    pub fn init<R: Rng>(rng: &mut R, shape: &ModelShape, dof: f64) -> Self {
        let f = shape.feature_width;
        let h = shape.classifier_hidden;
        Params {
            encoder: EncoderParams::init(rng, shape.input_width, shape.hidden, shape.latent),
            landmarks: LandmarkSet {
                u: Array2::zeros((shape.landmarks, shape.latent)),
                dof,
            },
            classifier: ClassifierParams {
                w_hidden: scaled_uniform(rng, f, h, f),
                b_hidden: scaled_uniform(rng, 1, h, f),
                w_out: scaled_uniform(rng, h, shape.classes, h),
                b_out: scaled_uniform(rng, 1, shape.classes, h),
            },
        }
    }

    pub fn tensors(&self) -> [&Array2<f64>; 9] {
        let (e, c) = (&self.encoder, &self.classifier);
        [
            &e.t1,
            &e.b1,
            &e.t2,
            &e.b2,
            &self.landmarks.u,
            &c.w_hidden,
            &c.b_hidden,
            &c.w_out,
            &c.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 9] {
        let (e, c) = (&mut self.encoder, &mut self.classifier);
        [
            &mut e.t1,
            &mut e.b1,
            &mut e.t2,
            &mut e.b2,
            &mut self.landmarks.u,
            &mut c.w_hidden,
            &mut c.b_hidden,
            &mut c.w_out,
            &mut c.b_out,
        ]
    }

    pub fn zeros_like(&self) -> Params {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn shape(&self) -> ModelShape {
        let e = &self.encoder;
        let c = &self.classifier;
        ModelShape {
            node_types: 0,
            input_width: e.t1.nrows(),
            hidden: e.t1.ncols(),
            latent: e.t2.ncols(),
            landmarks: self.landmarks.u.nrows(),
            feature_width: c.w_hidden.nrows(),
            classifier_hidden: c.w_hidden.ncols(),
            classes: c.w_out.ncols(),
        }
    }
}

/// Optimizer state. Adagrad accumulators start at `ADAGRAD_INIT`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub accumulators: Option<Params>,
}

pub const ADAGRAD_INIT: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &Params) -> Self {
        let accumulators = match kind {
            OptimizerKind::Sgd => None,
            OptimizerKind::Adagrad => {
                let mut acc = params.zeros_like();
                for t in acc.tensors_mut() {
                    t.fill(ADAGRAD_INIT);
                }
                Some(acc)
            }
        };
        Optimizer {
            kind,
            learning_rate,
            accumulators,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        let lr = self.learning_rate;
        match self.accumulators.as_mut() {
            None => {
                for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    p.scaled_add(-lr, g);
                }
            }
            Some(acc) => {
                for ((p, g), a) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(acc.tensors_mut())
                {
                    Zip::from(p).and(g).and(a).for_each(|p, &g, a| {
                        *a += g * g;
                        *p -= lr * g / a.sqrt();
                    });
                }
            }
        }
    }
}

/// Trainable parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: TrainConfig,
    pub shape: ModelShape,
    pub params: Params,
    pub optimizer: Optimizer,
}

impl ModelState {
    pub fn new<R: Rng>(rng: &mut R, cfg: &TrainConfig, node_types: usize, classes: usize) -> Self {
        let shape = ModelShape::new(cfg, node_types, classes);
        let params = Params::init(rng, &shape, cfg.dof);
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &params);
        ModelState {
            config: cfg.clone(),
            shape,
            params,
            optimizer,
        }
    }
}

/// A graph with its node features, substructure matrix and dense adjacency precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGraph {
    pub x: Array2<f64>,
    pub z: Array2<f64>,
    pub adjacency: Array2<f64>,
    pub label: usize,
}

impl PreparedGraph {
    pub fn new(g: &Graph, node_types: usize, cfg: &SubstructureConfig) -> Result<Self> {
        let x = one_hot_features(g, node_types)?;
        let z = build_substructures(g, &x, cfg)?.values;
        Ok(PreparedGraph {
            x,
            z,
            adjacency: g.adjacency_matrix(),
            label: g.class_label(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.x.nrows()
    }
}

pub fn prepare_dataset(
    bundle: &DatasetBundle,
    cfg: &SubstructureConfig,
    exec: Execution,
) -> Result<Vec<PreparedGraph>> {
    cfg.validate()?;
    let c = bundle.node_label_count;
    exec.try_map(&bundle.graphs, |g| PreparedGraph::new(g, c, cfg))
}

/// Parameter leaves of one tape.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub encoder: EncoderVars,
    pub landmarks: Var,
    pub w_hidden: Var,
    pub b_hidden: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl ParamVars {
    pub fn borrow<'a>(tape: &mut Tape<'a>, p: &'a Params, requires_grad: bool) -> Self {
        let encoder = EncoderVars::borrow(tape, &p.encoder, requires_grad);
        let c = &p.classifier;
        ParamVars {
            encoder,
            landmarks: tape.leaf_ref(&p.landmarks.u, requires_grad),
            w_hidden: tape.leaf_ref(&c.w_hidden, requires_grad),
            b_hidden: tape.leaf_ref(&c.b_hidden, requires_grad),
            w_out: tape.leaf_ref(&c.w_out, requires_grad),
            b_out: tape.leaf_ref(&c.b_out, requires_grad),
        }
    }

    pub fn all(&self) -> [Var; 9] {
        let e = &self.encoder;
        [
            e.t1,
            e.b1,
            e.t2,
            e.b2,
            self.landmarks,
            self.w_hidden,
            self.b_hidden,
            self.w_out,
            self.b_out,
        ]
    }

    /// Moves gradients out of the tape; zeros where none flowed.
    pub fn take_gradients(&self, tape: &mut Tape<'_>, like: &Params) -> Params {
        let mut grads = self
            .all()
            .into_iter()
            .zip(like.tensors())
            .map(|(v, t)| tape.take_grad(v).unwrap_or_else(|| Array2::zeros(t.dim())));
        let mut next = || grads.next().expect("nine parameter tensors");
        Params {
            encoder: EncoderParams {
                t1: next(),
                b1: next(),
                t2: next(),
                b2: next(),
            },
            landmarks: LandmarkSet {
                u: next(),
                dof: like.landmarks.dof,
            },
            classifier: ClassifierParams {
                w_hidden: next(),
                b_hidden: next(),
                w_out: next(),
                b_out: next(),
            },
        }
    }
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub embedding: Var,
    pub assignment: Var,
    pub pooled: PoolVars,
    pub logits: Var,
}

pub fn forward_on_tape<'a>(
    tape: &mut Tape<'a>,
    pv: &ParamVars,
    graph: &'a PreparedGraph,
    cfg: &TrainConfig,
    dof: f64,
) -> Result<ForwardVars> {
    let z = tape.leaf_ref(&graph.z, false);
    let x = tape.leaf_ref(&graph.x, false);
    let a = tape.leaf_ref(&graph.adjacency, false);
    forward_vars(tape, pv, z, x, a, cfg, dof)
}

/// Forward pass with the graph data already on the tape.
pub fn forward_vars(
    tape: &mut Tape<'_>,
    pv: &ParamVars,
    z: Var,
    x: Var,
    a: Var,
    cfg: &TrainConfig,
    dof: f64,
) -> Result<ForwardVars> {
    let h = encode_on_tape(tape, z, &pv.encoder, cfg.activation)?;
    let w = assign_on_tape(tape, h, pv.landmarks, dof)?;
    let pooled = pool_on_tape(tape, w, x, a)?;
    let feat = feature_on_tape(tape, &pooled, cfg.features)?;
    let hid = tape.matmul(feat, pv.w_hidden)?;
    let hid = tape.add_row(hid, pv.b_hidden)?;
    let hid = tape.tanh(hid);
    let logits = tape.matmul(hid, pv.w_out)?;
    let logits = tape.add_row(logits, pv.b_out)?;
    Ok(ForwardVars {
        embedding: h,
        assignment: w,
        pooled,
        logits,
    })
}

/// Everything an inspection of one graph needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInspection {
    pub embedding: Array2<f64>,
    pub assignment: AssignmentMatrix,
    pub pooled: PooledFeatures,
    pub logits: Array2<f64>,
}

pub fn inspect_graph(
    params: &Params,
    cfg: &TrainConfig,
    graph: &PreparedGraph,
) -> Result<GraphInspection> {
    let mut tape = Tape::new();
    let pv = ParamVars::borrow(&mut tape, params, false);
    let f = forward_on_tape(&mut tape, &pv, graph, cfg, params.landmarks.dof)?;
    Ok(GraphInspection {
        embedding: tape.value(f.embedding).clone(),
        assignment: AssignmentMatrix {
            values: tape.value(f.assignment).clone(),
        },
        pooled: PooledFeatures::from_tape(&tape, &f.pooled),
        logits: tape.value(f.logits).clone(),
    })
}

pub fn predict(params: &Params, cfg: &TrainConfig, graph: &PreparedGraph) -> Result<usize> {
    let logits = inspect_graph(params, cfg, graph)?.logits;
    Ok(argmax(logits.row(0).iter().copied()))
}

/// Classifier input row (1 × F) of one graph.
pub fn feature_row(
    params: &Params,
    cfg: &TrainConfig,
    graph: &PreparedGraph,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let enc = EncoderVars::borrow(&mut tape, &params.encoder, false);
    let u = tape.leaf_ref(&params.landmarks.u, false);
    let z = tape.leaf_ref(&graph.z, false);
    let x = tape.leaf_ref(&graph.x, false);
    let a = tape.leaf_ref(&graph.adjacency, false);
    let h = encode_on_tape(&mut tape, z, &enc, cfg.activation)?;
    let w = assign_on_tape(&mut tape, h, u, params.landmarks.dof)?;
    let pooled = pool_on_tape(&mut tape, w, x, a)?;
    let f = feature_on_tape(&mut tape, &pooled, cfg.features)?;
    Ok(tape.value(f).clone())
}

/// Predicted classes for many graphs, running the classifier once on the stacked features.
pub fn predict_many(
    params: &Params,
    cfg: &TrainConfig,
    graphs: &[&PreparedGraph],
) -> Result<Vec<usize>> {
    if graphs.is_empty() {
        return Ok(Vec::new());
    }
    let rows = cfg
        .execution
        .try_map(graphs, |g| feature_row(params, cfg, g))?;
    let views: Vec<ArrayView2<f64>> = rows.iter().map(|r| r.view()).collect();
    let features = ndarray::concatenate(Axis(0), &views).map_err(|e| SlimError::Numeric {
        op: "predict_many",
        detail: e.to_string(),
    })?;
    let logits = classifier_logits(&params.classifier, &features);
    Ok(logits
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect())
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Node embeddings `H` of one graph under the current encoder.
pub fn inspect_embedding(
    params: &Params,
    cfg: &TrainConfig,
    graph: &PreparedGraph,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let z = tape.leaf_ref(&graph.z, false);
    let enc = EncoderVars::borrow(&mut tape, &params.encoder, false);
    let h = encode_on_tape(&mut tape, z, &enc, cfg.activation)?;
    Ok(tape.value(h).clone())
}

/// Current soft assignments of a graph and their sharpened target.
pub fn target_for(
    params: &Params,
    cfg: &TrainConfig,
    graph: &PreparedGraph,
) -> Result<TargetMatrix> {
    let mut tape = Tape::new();
    let z = tape.leaf_ref(&graph.z, false);
    let enc = EncoderVars::borrow(&mut tape, &params.encoder, false);
    let u = tape.leaf_ref(&params.landmarks.u, false);
    let h = encode_on_tape(&mut tape, z, &enc, cfg.activation)?;
    let w = assign_on_tape(&mut tape, h, u, params.landmarks.dof)?;
    Ok(target_distribution(&AssignmentMatrix {
        values: tape.value(w).clone(),
    }))
}

/// Unweighted per-graph loss terms; `cross_entropy` is `None` for unlabeled graphs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphTerms {
    pub cross_entropy: Option<f64>,
    pub cooccurrence: f64,
    pub cluster: f64,
    pub predicted: usize,
}

/// Per-graph weights applied to the three terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub cross_entropy: f64,
    pub cooccurrence: f64,
    pub cluster: f64,
}

/// Loss nodes of one graph's objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub forward: ForwardVars,
    pub cooccurrence: Var,
    pub cluster: Var,
    pub cross_entropy: Option<Var>,
    pub total: Var,
}

/// `weights.cross_entropy · CE + weights.cooccurrence · L_co + weights.cluster · KL`
/// for one graph. With `label = None` the classification term is omitted.
#[allow(clippy::too_many_arguments)]
pub fn objective_vars(
    tape: &mut Tape<'_>,
    pv: &ParamVars,
    data: [Var; 3],
    adjacency: &Array2<f64>,
    cfg: &TrainConfig,
    dof: f64,
    label: Option<usize>,
    target: &TargetMatrix,
    weights: TermWeights,
) -> Result<ObjectiveVars> {
    let [z, x, a] = data;
    let forward = forward_vars(tape, pv, z, x, a, cfg, dof)?;
    let co = cooccurrence_loss_on_tape(tape, forward.embedding, adjacency)?;
    let cl = cluster_loss_on_tape(tape, forward.assignment, target)?;
    let co_w = tape.affine(co, weights.cooccurrence, 0.0);
    let cl_w = tape.affine(cl, weights.cluster, 0.0);
    let mut total = tape.add(co_w, cl_w)?;
    let mut cross_entropy = None;
    if let Some(y) = label {
        let ce = tape.cross_entropy(forward.logits, &[y])?;
        let ce_w = tape.affine(ce, weights.cross_entropy, 0.0);
        total = tape.add(total, ce_w)?;
        cross_entropy = Some(ce);
    }
    Ok(ObjectiveVars {
        forward,
        cooccurrence: co,
        cluster: cl,
        cross_entropy,
        total,
    })
}

/// One graph's contribution to the joint objective. With `label = None`
/// the classification term is omitted and the label is never consulted.
pub fn graph_objective(
    params: &Params,
    cfg: &TrainConfig,
    graph: &PreparedGraph,
    label: Option<usize>,
    target: &TargetMatrix,
    weights: TermWeights,
    with_gradients: bool,
) -> Result<(GraphTerms, f64, Option<Params>)> {
    let mut tape = Tape::new();
    let pv = ParamVars::borrow(&mut tape, params, with_gradients);
    let data = [
        tape.leaf_ref(&graph.z, false),
        tape.leaf_ref(&graph.x, false),
        tape.leaf_ref(&graph.adjacency, false),
    ];
    let o = objective_vars(
        &mut tape,
        &pv,
        data,
        &graph.adjacency,
        cfg,
        params.landmarks.dof,
        label,
        target,
        weights,
    )?;
    let terms = GraphTerms {
        cross_entropy: o.cross_entropy.map(|v| tape.scalar(v)),
        cooccurrence: tape.scalar(o.cooccurrence),
        cluster: tape.scalar(o.cluster),
        predicted: argmax(tape.value(o.forward.logits).row(0).iter().copied()),
    };
    let total_value = tape.scalar(o.total);
    let grads = if with_gradients {
        tape.backward(o.total)?;
        Some(pv.take_gradients(&mut tape, params))
    } else {
        None
    };
    Ok((terms, total_value, grads))
}

/// End-to-end gradient check case: one small random graph, every model
/// parameter as an input, and the weighted joint objective as output.
pub fn joint_loss_grad_case(seed: u64) -> GradCheckCase {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let edges = [(0, 1), (1, 2), (2, 3), (3, 0), (1, 3), (3, 4)];
    let g = Graph::new(5, &edges, vec![0, 1, 2, 1, 0], 1).expect("valid toy graph");
    let cfg = TrainConfig {
        landmarks: 3,
        latent: 2,
        features: FeatureSet::InteractionDensityMeans,
        lambda_embed: 0.3,
        lambda_cluster: 0.7,
        ..TrainConfig::default()
    };
    let prepared = PreparedGraph::new(&g, 3, &cfg.substructure).expect("valid toy graph");
    let shape = ModelShape::new(&cfg, 3, 2);
    let mut params = Params::init(&mut rng, &shape, cfg.dof);
    params.landmarks.u = scaled_uniform(&mut rng, 3, 2, 1) * 2.0 + 0.5;
    let target = target_for(&params, &cfg, &prepared).expect("toy forward pass");
    let weights = TermWeights {
        cross_entropy: 1.0,
        cooccurrence: cfg.lambda_embed,
        cluster: cfg.lambda_cluster,
    };
    let inputs: Vec<Array2<f64>> = params.tensors().into_iter().cloned().collect();
    let dof = cfg.dof;
    GradCheckCase::new("joint_loss", inputs, move |tape, v| {
        let pv = ParamVars {
            encoder: EncoderVars {
                t1: v[0],
                b1: v[1],
                t2: v[2],
                b2: v[3],
            },
            landmarks: v[4],
            w_hidden: v[5],
            b_hidden: v[6],
            w_out: v[7],
            b_out: v[8],
        };
        let data = [
            tape.constant(prepared.z.clone()),
            tape.constant(prepared.x.clone()),
            tape.constant(prepared.adjacency.clone()),
        ];
        let o = objective_vars(
            tape,
            &pv,
            data,
            &prepared.adjacency,
            &cfg,
            dof,
            Some(prepared.label),
            &target,
            weights,
        )?;
        Ok(o.total)
    })
}

/// A graph participating in a batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub graph: &'a PreparedGraph,
    pub label: Option<usize>,
    pub target: &'a TargetMatrix,
    pub id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub total: f64,
    /// Mean cross-entropy over labeled graphs (0 when none are labeled).
    pub cross_entropy: f64,
    /// Summed co-occurrence loss.
    pub cooccurrence: f64,
    /// Summed clustering KL.
    pub cluster: f64,
    pub labeled: usize,
    pub correct: usize,
}

/// Per-graph half of a batched pass: everything up to the classifier input.
struct FrontPass<'a> {
    tape: Tape<'a>,
    encoder: EncoderVars,
    landmarks: Var,
    feature: Var,
    cooccurrence: Var,
    cluster: Var,
}

fn front_pass<'a>(
    params: &'a Params,
    cfg: &TrainConfig,
    item: &BatchItem<'a>,
    with_gradients: bool,
) -> Result<FrontPass<'a>> {
    let mut tape = Tape::new();
    let encoder = EncoderVars::borrow(&mut tape, &params.encoder, with_gradients);
    let landmarks = tape.leaf_ref(&params.landmarks.u, with_gradients);
    let g = item.graph;
    let z = tape.leaf_ref(&g.z, false);
    let x = tape.leaf_ref(&g.x, false);
    let a = tape.leaf_ref(&g.adjacency, false);
    let h = encode_on_tape(&mut tape, z, &encoder, cfg.activation)?;
    let w = assign_on_tape(&mut tape, h, landmarks, params.landmarks.dof)?;
    let pooled = pool_on_tape(&mut tape, w, x, a)?;
    let feature = feature_on_tape(&mut tape, &pooled, cfg.features)?;
    let cooccurrence = cooccurrence_loss_on_tape(&mut tape, h, &g.adjacency)?;
    let cluster = cluster_loss_on_tape(&mut tape, w, item.target)?;
    Ok(FrontPass {
        tape,
        encoder,
        landmarks,
        feature,
        cooccurrence,
        cluster,
    })
}

/// Gradients of the encoder and landmarks flowing back from one graph.
fn back_pass(
    mut front: FrontPass<'_>,
    cfg: &TrainConfig,
    feature_grad: Option<Array2<f64>>,
) -> Result<[Array2<f64>; 5]> {
    let t = &mut front.tape;
    let co = t.affine(front.cooccurrence, cfg.lambda_embed, 0.0);
    let cl = t.affine(front.cluster, cfg.lambda_cluster, 0.0);
    let mut total = t.add(co, cl)?;
    if let Some(g) = feature_grad {
        // a constant-weighted sum injects the classifier's gradient into this tape
        let bridge = t.weighted_sum(front.feature, g)?;
        total = t.add(total, bridge)?;
    }
    t.backward(total)?;
    let e = front.encoder;
    let mut take = |v: Var| {
        t.take_grad(v)
            .unwrap_or_else(|| Array2::zeros(t.value(v).dim()))
    };
    Ok([
        take(e.t1),
        take(e.b1),
        take(e.t2),
        take(e.b2),
        take(front.landmarks),
    ])
}

/// Plain forward of the classifier head over stacked feature rows.
pub fn classifier_logits(c: &ClassifierParams, features: &Array2<f64>) -> Array2<f64> {
    let hidden = (features.dot(&c.w_hidden) + &c.b_hidden).mapv(f64::tanh);
    hidden.dot(&c.w_out) + &c.b_out
}

/// Mean cross-entropy over labeled graphs plus the weighted sums of the
/// co-occurrence and clustering terms over every graph in the batch.
///
/// Graphs are processed in two phases so the classifier runs once on the
/// stacked features of the batch instead of once per graph.
pub fn joint_loss_and_gradients(
    params: &Params,
    cfg: &TrainConfig,
    batch: &[BatchItem<'_>],
    with_gradients: bool,
) -> Result<(JointLoss, Option<Params>)> {
    if batch.is_empty() {
        return Err(SlimError::Config(
            "joint loss needs a non-empty batch".into(),
        ));
    }
    let fronts = cfg
        .execution
        .try_map(batch, |item| front_pass(params, cfg, item, with_gradients))?;
    let mut loss = JointLoss {
        total: 0.0,
        cross_entropy: 0.0,
        cooccurrence: fronts.iter().map(|f| f.tape.scalar(f.cooccurrence)).sum(),
        cluster: fronts.iter().map(|f| f.tape.scalar(f.cluster)).sum(),
        labeled: 0,
        correct: 0,
    };

    let labeled: Vec<(usize, usize)> = batch
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.label.map(|y| (i, y)))
        .collect();
    loss.labeled = labeled.len();
    let mut feature_grads: Vec<Option<Array2<f64>>> = vec![None; batch.len()];
    let mut classifier_grads = None;
    if !labeled.is_empty() {
        let rows: Vec<ArrayView2<f64>> = labeled
            .iter()
            .map(|&(i, _)| fronts[i].tape.value(fronts[i].feature).view())
            .collect();
        let features = ndarray::concatenate(Axis(0), &rows).map_err(|e| SlimError::Numeric {
            op: "joint_loss",
            detail: e.to_string(),
        })?;
        let targets: Vec<usize> = labeled.iter().map(|&(_, y)| y).collect();
        let c = &params.classifier;
        let mut tape = Tape::new();
        let f = tape.leaf(features, with_gradients);
        let wh = tape.leaf_ref(&c.w_hidden, with_gradients);
        let bh = tape.leaf_ref(&c.b_hidden, with_gradients);
        let wo = tape.leaf_ref(&c.w_out, with_gradients);
        let bo = tape.leaf_ref(&c.b_out, with_gradients);
        let hid = tape.matmul(f, wh)?;
        let hid = tape.add_row(hid, bh)?;
        let hid = tape.tanh(hid);
        let logits = tape.matmul(hid, wo)?;
        let logits = tape.add_row(logits, bo)?;
        let ce = tape.cross_entropy(logits, &targets)?;
        loss.cross_entropy = tape.scalar(ce);
        loss.correct = tape
            .value(logits)
            .rows()
            .into_iter()
            .zip(&targets)
            .filter(|(row, &y)| argmax(row.iter().copied()) == y)
            .count();
        if with_gradients {
            tape.backward(ce)?;
            let df = tape.take_grad(f).expect("feature gradient");
            for (r, &(i, _)) in labeled.iter().enumerate() {
                feature_grads[i] = Some(df.slice(ndarray::s![r..r + 1, ..]).to_owned());
            }
            let mut take = |v: Var| tape.take_grad(v).expect("classifier gradient");
            classifier_grads = Some(ClassifierParams {
                w_hidden: take(wh),
                b_hidden: take(bh),
                w_out: take(wo),
                b_out: take(bo),
            });
        }
    }
    loss.total = loss.cross_entropy
        + cfg.lambda_embed * loss.cooccurrence
        + cfg.lambda_cluster * loss.cluster;
    if !with_gradients {
        return Ok((loss, None));
    }

    let work: Vec<(FrontPass<'_>, Option<Array2<f64>>)> =
        fronts.into_iter().zip(feature_grads).collect();
    let parts = cfg
        .execution
        .try_map_vec(work, |(front, fg)| back_pass(front, cfg, fg))?;
    let mut sums: Option<[Array2<f64>; 5]> = None;
    for part in parts {
        match sums.as_mut() {
            None => sums = Some(part),
            Some(acc) => {
                for (a, p) in acc.iter_mut().zip(part) {
                    *a += &p;
                }
            }
        }
    }
    let [t1, b1, t2, b2, u] = sums.expect("non-empty batch");
    let classifier = classifier_grads.unwrap_or_else(|| ClassifierParams {
        w_hidden: Array2::zeros(params.classifier.w_hidden.dim()),
        b_hidden: Array2::zeros(params.classifier.b_hidden.dim()),
        w_out: Array2::zeros(params.classifier.w_out.dim()),
        b_out: Array2::zeros(params.classifier.b_out.dim()),
    });
    let grads = Params {
        encoder: EncoderParams { t1, b1, t2, b2 },
        landmarks: LandmarkSet {
            u,
            dof: params.landmarks.dof,
        },
        classifier,
    };
    Ok((loss, Some(grads)))
}

pub fn joint_loss(
    params: &Params,
    cfg: &TrainConfig,
    batch: &[BatchItem<'_>],
) -> Result<JointLoss> {
    joint_loss_and_gradients(params, cfg, batch, false).map(|(l, _)| l)
}

/// Named matrix inside a saved model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub format_version: u32,
    pub config: TrainConfig,
    pub shape: ModelShape,
    pub dof: f64,
    pub tensors: Vec<SavedTensor>,
}

impl SavedModel {
    pub fn from_state(state: &ModelState) -> Self {
        let tensors = PARAM_NAMES
            .iter()
            .zip(state.params.tensors())
            .map(|(name, t)| SavedTensor {
                name: name.to_string(),
                rows: t.nrows(),
                cols: t.ncols(),
                data: t.iter().copied().collect(),
            })
            .collect();
        SavedModel {
            format_version: MODEL_FORMAT_VERSION,
            config: state.config.clone(),
            shape: state.shape,
            dof: state.params.landmarks.dof,
            tensors,
        }
    }

    pub fn into_params(self) -> Result<Params> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(SlimError::Model(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        if self.tensors.len() != PARAM_NAMES.len() {
            return Err(SlimError::Model(format!(
                "expected {} tensors, found {}",
                PARAM_NAMES.len(),
                self.tensors.len()
            )));
        }
        let mut mats = Vec::with_capacity(PARAM_NAMES.len());
        for (t, name) in self.tensors.into_iter().zip(PARAM_NAMES) {
            if t.name != name {
                return Err(SlimError::Model(format!(
                    "expected tensor {name}, found {}",
                    t.name
                )));
            }
            let m = Array2::from_shape_vec((t.rows, t.cols), t.data)
                .map_err(|e| SlimError::Model(format!("tensor {name}: {e}")))?;
            mats.push(m);
        }
        let mut it = mats.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(Params {
            encoder: EncoderParams {
                t1: next(),
                b1: next(),
                t2: next(),
                b2: next(),
            },
            landmarks: LandmarkSet {
                u: next(),
                dof: self.dof,
            },
            classifier: ClassifierParams {
                w_hidden: next(),
                b_hidden: next(),
                w_out: next(),
                b_out: next(),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| SlimError::Model(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| SlimError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SlimError::MissingFile { path: path.into() });
        }
        let text = std::fs::read_to_string(path).map_err(|e| SlimError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| SlimError::Model(format!("{}: {e}", path.display())))
    }
}
