//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Only the operations the model needs are provided. Every node records the
//! operation that produced it; [`Tape::backward`] walks the tape in reverse
//! and accumulates gradients additively, so a value used twice receives both
//! contributions. Scalars are 1 × 1 matrices.

use std::borrow::Cow;

use ndarray::{Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlimError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Affine {
        input: Var,
        scale: f64,
    },
    Powf {
        input: Var,
        exponent: f64,
    },
    Elementwise {
        input: Var,
        derivative: fn(f64) -> f64,
    },
    NormalizeRows(Var),
    ColumnSums(Var),
    Sum(Var),
    WeightedSum {
        input: Var,
        weights: Array2<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    KlDiv(Var, Var),
    SquaredDistanceRows(Var, Var),
    ScaleCols {
        input: Var,
        scale: Var,
        eps: f64,
    },
    DiagSandwich {
        input: Var,
        scale: Var,
        eps: f64,
    },
    Reshape(Var),
    ConcatCols(Vec<Var>),
}

/// `‖a − b‖²`, with a fast path for contiguous rows.
pub(crate) fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(x), Some(y)) => x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum(),
        _ => Zip::from(&a)
            .and(&b)
            .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y)),
    }
}

/// A value on the tape together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct DiffTensor<'a> {
    value: Cow<'a, Array2<f64>>,
    grad: Option<Array2<f64>>,
    requires_grad: bool,
    op: Op,
}

impl DiffTensor<'_> {
    pub fn value(&self) -> &Array2<f64> {
        &self.value
    }

    /// Accumulated gradient; `None` until backward reaches this node.
    pub fn gradient(&self) -> Option<&Array2<f64>> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

fn shape_str(a: &Array2<f64>) -> String {
    format!("{}x{}", a.nrows(), a.ncols())
}

fn check_finite(op: &'static str, a: &Array2<f64>) -> Result<()> {
    if let Some(x) = a.iter().find(|x| !x.is_finite()) {
        return Err(SlimError::Numeric {
            op,
            detail: format!("input contains {x}"),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

fn log_softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<DiffTensor<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Array2<f64>>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(DiffTensor {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Array2<f64>, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), rg, op)
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), requires_grad, Op::Leaf)
    }

    /// Leaf that borrows its value, so large parameters are not copied.
    pub fn leaf_ref(&mut self, value: &'a Array2<f64>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), x), false)
    }

    pub fn node(&self, v: Var) -> &DiffTensor<'a> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Entry (0, 0); intended for 1 × 1 results.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros of its shape when none flowed back.
    pub fn grad_or_zeros(&self, v: Var) -> Array2<f64> {
        let n = &self.nodes[v.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Array2::zeros(n.value.raw_dim()))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Array2<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(SlimError::shape(
                "matmul",
                format!("{} rows on the right", av.ncols()),
                shape_str(bv),
            ));
        }
        let value = av.dot(bv);
        Ok(self.derived(value, &[a, b], Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(SlimError::shape(
                "matmul_nt",
                format!("{} columns", av.ncols()),
                shape_str(bv),
            ));
        }
        let value = av.dot(&bv.t());
        Ok(self.derived(value, &[a, b], Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.derived(value, &[a], Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(SlimError::shape("add", shape_str(av), shape_str(bv)));
        }
        let value = av + bv;
        Ok(self.derived(value, &[a, b], Op::Add(a, b)))
    }

    /// Adds a 1 × m row to every row of an n × m matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(SlimError::shape(
                "add_row",
                format!("1x{}", av.ncols()),
                shape_str(rv),
            ));
        }
        let value = av + rv;
        Ok(self.derived(value, &[a, row], Op::AddRow(a, row)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.derived(value, &[a], Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.derived(value, &[a], Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.derived(value, &[a], Op::Relu(a))
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        self.derived(value, &[a], Op::Affine { input: a, scale })
    }

    /// Elementwise `a^exponent`; the base must be positive.
    pub fn powf(&mut self, a: Var, exponent: f64) -> Result<Var> {
        let av = self.value(a);
        if let Some(x) = av.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
            return Err(SlimError::Numeric {
                op: "powf",
                detail: format!("base {x} is not positive"),
            });
        }
        let value = av.mapv(|x| x.powf(exponent));
        Ok(self.derived(value, &[a], Op::Powf { input: a, exponent }))
    }

    /// Elementwise map with a caller-supplied derivative, evaluated at the input.
    pub fn elementwise(&mut self, a: Var, f: fn(f64) -> f64, derivative: fn(f64) -> f64) -> Var {
        let value = self.value(a).mapv(f);
        self.derived(
            value,
            &[a],
            Op::Elementwise {
                input: a,
                derivative,
            },
        )
    }

    /// Divides every row by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let s = row.sum();
            if !(s.is_finite() && s != 0.0) {
                return Err(SlimError::Numeric {
                    op: "normalize_rows",
                    detail: format!("row sum {s}"),
                });
            }
            row /= s;
        }
        Ok(self.derived(value, &[a], Op::NormalizeRows(a)))
    }

    /// 1 × m row of column sums.
    pub fn column_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.derived(value, &[a], Op::ColumnSums(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.derived(value, &[a], Op::Sum(a))
    }

    /// `Σ weights ⊙ a` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Array2<f64>) -> Result<Var> {
        let av = self.value(a);
        if av.dim() != weights.dim() {
            return Err(SlimError::shape(
                "weighted_sum",
                shape_str(av),
                shape_str(&weights),
            ));
        }
        let value = Array2::from_elem((1, 1), (av * &weights).sum());
        Ok(self.derived(value, &[a], Op::WeightedSum { input: a, weights }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        check_finite("softmax_rows", self.value(a))?;
        let value = softmax_rows(self.value(a));
        Ok(self.derived(value, &[a], Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        check_finite("log_softmax_rows", self.value(a))?;
        let value = log_softmax_rows(self.value(a));
        Ok(self.derived(value, &[a], Op::LogSoftmaxRows(a)))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        check_finite("cross_entropy", lv)?;
        if targets.len() != lv.nrows() {
            return Err(SlimError::shape(
                "cross_entropy",
                format!("{} targets", lv.nrows()),
                targets.len().to_string(),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= lv.ncols()) {
            return Err(SlimError::shape(
                "cross_entropy",
                format!("class index below {}", lv.ncols()),
                t.to_string(),
            ));
        }
        let ls = log_softmax_rows(lv);
        let total: f64 = targets.iter().enumerate().map(|(i, &t)| -ls[[i, t]]).sum();
        let value = Array2::from_elem((1, 1), total / targets.len() as f64);
        Ok(self.derived(
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// `KL(P ‖ Q) = Σ P log(P / Q)` with `0 log 0 = 0`; `Q` must be positive.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.dim() != qv.dim() {
            return Err(SlimError::shape("kl_div", shape_str(pv), shape_str(qv)));
        }
        check_finite("kl_div", pv)?;
        check_finite("kl_div", qv)?;
        if pv.iter().any(|&x| x < 0.0) || qv.iter().any(|&x| x <= 0.0) {
            return Err(SlimError::Numeric {
                op: "kl_div",
                detail: "P must be non-negative and Q positive".into(),
            });
        }
        let total = Zip::from(pv).and(qv).fold(0.0, |acc, &pi, &qi| {
            if pi > 0.0 {
                acc + pi * (pi / qi).ln()
            } else {
                acc
            }
        });
        let value = Array2::from_elem((1, 1), total);
        Ok(self.derived(value, &[p, q], Op::KlDiv(p, q)))
    }

    /// n × K matrix of `‖a_i − b_k‖²` for a (n × d) and b (K × d).
    pub fn squared_distance_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(SlimError::shape(
                "squared_distance_rows",
                format!("{} columns", av.ncols()),
                shape_str(bv),
            ));
        }
        let mut value = Array2::zeros((av.nrows(), bv.nrows()));
        for (i, ar) in av.rows().into_iter().enumerate() {
            for (k, br) in bv.rows().into_iter().enumerate() {
                value[[i, k]] = sq_dist(ar, br);
            }
        }
        Ok(self.derived(value, &[a, b], Op::SquaredDistanceRows(a, b)))
    }

    /// `a_ij / (s_j + eps)` with `s` a 1 × m row.
    pub fn scale_cols(&mut self, a: Var, scale: Var, eps: f64) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(scale));
        if sv.nrows() != 1 || sv.ncols() != av.ncols() {
            return Err(SlimError::shape(
                "scale_cols",
                format!("1x{}", av.ncols()),
                shape_str(sv),
            ));
        }
        let r = sv.mapv(|x| 1.0 / (x + eps));
        let value = av * &r;
        Ok(self.derived(
            value,
            &[a, scale],
            Op::ScaleCols {
                input: a,
                scale,
                eps,
            },
        ))
    }

    /// `diag(s + eps)⁻¹ · a · diag(s + eps)⁻¹` for square `a` and a 1 × m row `s`.
    pub fn diag_sandwich(&mut self, a: Var, scale: Var, eps: f64) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(scale));
        if av.nrows() != av.ncols() || sv.nrows() != 1 || sv.ncols() != av.ncols() {
            return Err(SlimError::shape(
                "diag_sandwich",
                format!("square input and 1x{} scale", av.ncols()),
                format!("{} and {}", shape_str(av), shape_str(sv)),
            ));
        }
        let r = sv.mapv(|x| 1.0 / (x + eps));
        let value = Array2::from_shape_fn(av.dim(), |(i, j)| av[[i, j]] * r[[0, i]] * r[[0, j]]);
        Ok(self.derived(
            value,
            &[a, scale],
            Op::DiagSandwich {
                input: a,
                scale,
                eps,
            },
        ))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if av.len() != rows * cols {
            return Err(SlimError::shape(
                "reshape",
                format!("{} elements", rows * cols),
                shape_str(av),
            ));
        }
        let data: Vec<f64> = av.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), data).expect("length checked");
        Ok(self.derived(value, &[a], Op::Reshape(a)))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).nrows());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        if views.iter().any(|v| v.nrows() != rows) {
            return Err(SlimError::shape(
                "concat_cols",
                format!("{rows} rows"),
                "ragged inputs",
            ));
        }
        let value = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| SlimError::shape("concat_cols", "", e.to_string()))?;
        Ok(self.derived(value, parts, Op::ConcatCols(parts.to_vec())))
    }

    /// Back-propagates from `output`, seeding its gradient with ones.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let seed = Array2::ones(self.nodes[output.0].value.raw_dim());
        self.accumulate(output, seed);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.as_ref() else {
                continue;
            };
            let contributions = self.input_grads(idx, g);
            for (v, contrib) in contributions {
                self.accumulate(v, contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Array2<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => *g += &contrib,
            None => node.grad = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, idx: usize, g: &Array2<f64>) -> Vec<(Var, Array2<f64>)> {
        let y = &*self.nodes[idx].value;
        let val = |v: Var| &*self.nodes[v.0].value;
        let mut out = Vec::with_capacity(2);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.dot(&val(*b).t())));
                }
                if self.wants(*b) {
                    out.push((*b, val(*a).t().dot(g)));
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.wants(*a) {
                    out.push((*a, g.dot(val(*b))));
                }
                if self.wants(*b) {
                    out.push((*b, g.t().dot(val(*a))));
                }
            }
            Op::Transpose(a) => out.push((*a, g.t().to_owned())),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddRow(a, row) => {
                out.push((*a, g.clone()));
                if self.wants(*row) {
                    out.push((*row, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
            }
            Op::Sigmoid(a) => out.push((*a, g * &y.mapv(|s| s * (1.0 - s)))),
            Op::Tanh(a) => out.push((*a, g * &y.mapv(|t| 1.0 - t * t))),
            Op::Relu(a) => out.push((*a, g * &val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))),
            Op::Affine { input, scale } => out.push((*input, g * *scale)),
            Op::Powf { input, exponent } => {
                let e = *exponent;
                out.push((*input, g * &val(*input).mapv(|x| e * x.powf(e - 1.0))));
            }
            Op::Elementwise { input, derivative } => {
                out.push((*input, g * &val(*input).mapv(*derivative)));
            }
            Op::NormalizeRows(a) => {
                // y = a / s: da_ij = (g_ij − Σ_k g_ik y_ik) / s_i
                let av = val(*a);
                let mut da = g.clone();
                for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                    let s = av.row(i).sum();
                    let dot = g.row(i).dot(&y.row(i));
                    row.mapv_inplace(|gij| (gij - dot) / s);
                }
                out.push((*a, da));
            }
            Op::ColumnSums(a) => {
                let n = val(*a).nrows();
                let da = Array2::from_shape_fn((n, g.ncols()), |(_, j)| g[[0, j]]);
                out.push((*a, da));
            }
            Op::Sum(a) => out.push((*a, Array2::from_elem(val(*a).raw_dim(), g[[0, 0]]))),
            Op::WeightedSum { input, weights } => out.push((*input, weights * g[[0, 0]])),
            Op::SoftmaxRows(a) => {
                let mut da = g * y;
                for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                    let dot = g.row(i).dot(&y.row(i));
                    Zip::from(&mut row)
                        .and(&y.row(i))
                        .for_each(|d, &yi| *d -= yi * dot);
                }
                out.push((*a, da));
            }
            Op::LogSoftmaxRows(a) => {
                let mut da = g.clone();
                for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                    let gs = g.row(i).sum();
                    Zip::from(&mut row)
                        .and(&y.row(i))
                        .for_each(|d, &li| *d -= li.exp() * gs);
                }
                out.push((*a, da));
            }
            Op::CrossEntropy { logits, targets } => {
                let scale = g[[0, 0]] / targets.len() as f64;
                let mut da = softmax_rows(val(*logits));
                for (i, &t) in targets.iter().enumerate() {
                    da[[i, t]] -= 1.0;
                }
                da *= scale;
                out.push((*logits, da));
            }
            Op::KlDiv(p, q) => {
                let (pv, qv) = (val(*p), val(*q));
                let s = g[[0, 0]];
                if self.wants(*p) {
                    let dp = Zip::from(pv).and(qv).map_collect(|&pi, &qi| {
                        if pi > 0.0 {
                            s * ((pi / qi).ln() + 1.0)
                        } else {
                            0.0
                        }
                    });
                    out.push((*p, dp));
                }
                if self.wants(*q) {
                    out.push((
                        *q,
                        Zip::from(pv).and(qv).map_collect(|&pi, &qi| -s * pi / qi),
                    ));
                }
            }
            Op::SquaredDistanceRows(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                // d/da_i = 2 Σ_k g_ik (a_i − b_k) = 2 (rowsum(g)_i a_i − (g b)_i)
                if self.wants(*a) {
                    let rs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    out.push((*a, (av * &rs - g.dot(bv)) * 2.0));
                }
                if self.wants(*b) {
                    let cs = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                    out.push((*b, (bv * &cs - g.t().dot(av)) * 2.0));
                }
            }
            Op::ScaleCols { input, scale, eps } => {
                let (av, sv) = (val(*input), val(*scale));
                let r = sv.mapv(|x| 1.0 / (x + eps));
                if self.wants(*input) {
                    out.push((*input, g * &r));
                }
                if self.wants(*scale) {
                    // dy_ij/ds_j = −a_ij r_j²
                    let ga = (g * av).sum_axis(Axis(0)).insert_axis(Axis(0));
                    out.push((*scale, -ga * &r.mapv(|x| x * x)));
                }
            }
            Op::DiagSandwich { input, scale, eps } => {
                let (av, sv) = (val(*input), val(*scale));
                let r = sv.mapv(|x| 1.0 / (x + eps));
                let m = av.nrows();
                if self.wants(*input) {
                    out.push((
                        *input,
                        Array2::from_shape_fn((m, m), |(i, j)| g[[i, j]] * r[[0, i]] * r[[0, j]]),
                    ));
                }
                if self.wants(*scale) {
                    // y_ij = a_ij r_i r_j, dr_k/ds_k = −r_k²
                    let gy = g * y;
                    let by_row = gy.sum_axis(Axis(1));
                    let by_col = gy.sum_axis(Axis(0));
                    let ds = Array2::from_shape_fn((1, m), |(_, k)| {
                        -(by_row[k] + by_col[k]) * r[[0, k]]
                    });
                    out.push((*scale, ds));
                }
            }
            Op::Reshape(a) => {
                let shape = val(*a).raw_dim();
                let data: Vec<f64> = g.iter().copied().collect();
                out.push((
                    *a,
                    Array2::from_shape_vec(shape, data).expect("same element count"),
                ));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    if self.wants(p) {
                        out.push((p, g.slice(ndarray::s![.., offset..offset + w]).to_owned()));
                    }
                    offset += w;
                }
            }
        }
        out
    }
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// A forward computation over a list of inputs, used by [`grad_check`].
pub type Builder = dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var> + Send + Sync;

fn scalarize(tape: &mut Tape<'_>, out: Var) -> Result<Var> {
    let (r, c) = tape.value(out).dim();
    // fixed weights so that every output entry matters with a distinct factor
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = Array2::from_shape_fn((r, c), |_| rng.gen_range(0.5..1.5));
    tape.weighted_sum(out, w)
}

fn evaluate(build: &Builder, inputs: &[Array2<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
    let out = build(&mut tape, &vars)?;
    let s = scalarize(&mut tape, out)?;
    Ok(tape.scalar(s))
}

/// Compares analytic gradients of the scalarized output of `build` with
/// central differences `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate.
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(
    op_name: &str,
    build: &Builder,
    inputs: &[Array2<f64>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(SlimError::Config(format!(
            "grad_check step must be positive, got {step}"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let s = scalarize(&mut tape, out)?;
    tape.backward(s)?;
    let analytic: Vec<Array2<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for (idx, &x0) in input.indexed_iter() {
            probe[i][idx] = x0 + step;
            let plus = evaluate(build, &probe)?;
            probe[i][idx] = x0 - step;
            let minus = evaluate(build, &probe)?;
            probe[i][idx] = x0;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if !rel.is_finite() {
                worst = f64::INFINITY;
            } else {
                worst = worst.max(rel);
            }
        }
    }
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_relative_error: worst,
        step,
        tolerance,
        passed: worst <= tolerance,
    })
}

/// A named differentiable operation with representative inputs.
pub struct GradCheckCase {
    pub name: &'static str,
    pub inputs: Vec<Array2<f64>>,
    pub build: Box<Builder>,
}

impl GradCheckCase {
    pub fn new(
        name: &'static str,
        inputs: Vec<Array2<f64>>,
        build: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        GradCheckCase {
            name,
            inputs,
            build: Box::new(build),
        }
    }

    pub fn run(&self, step: f64, tolerance: f64) -> Result<GradCheckReport> {
        grad_check(self.name, &*self.build, &self.inputs, step, tolerance)
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}

fn row_stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = uniform(rng, rows, cols, 0.2, 1.0);
    for mut r in m.rows_mut() {
        let s = r.sum();
        r /= s;
    }
    m
}

/// Every differentiable tape operation with seeded random inputs.
pub fn registered_ops(seed: u64) -> Vec<GradCheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = vec![2usize, 0, 1];
    let mut cases = vec![
        GradCheckCase::new(
            "matmul",
            vec![
                uniform(&mut rng, 3, 4, -1.0, 1.0),
                uniform(&mut rng, 4, 2, -1.0, 1.0),
            ],
            |t, v| t.matmul(v[0], v[1]),
        ),
        GradCheckCase::new(
            "matmul_nt",
            vec![
                uniform(&mut rng, 3, 4, -1.0, 1.0),
                uniform(&mut rng, 2, 4, -1.0, 1.0),
            ],
            |t, v| t.matmul_nt(v[0], v[1]),
        ),
        GradCheckCase::new(
            "transpose",
            vec![uniform(&mut rng, 2, 3, -1.0, 1.0)],
            |t, v| Ok(t.transpose(v[0])),
        ),
        GradCheckCase::new(
            "add",
            vec![
                uniform(&mut rng, 2, 3, -1.0, 1.0),
                uniform(&mut rng, 2, 3, -1.0, 1.0),
            ],
            |t, v| t.add(v[0], v[1]),
        ),
        GradCheckCase::new(
            "add_row",
            vec![
                uniform(&mut rng, 3, 2, -1.0, 1.0),
                uniform(&mut rng, 1, 2, -1.0, 1.0),
            ],
            |t, v| t.add_row(v[0], v[1]),
        ),
        GradCheckCase::new(
            "sigmoid",
            vec![uniform(&mut rng, 3, 3, -3.0, 3.0)],
            |t, v| Ok(t.sigmoid(v[0])),
        ),
        GradCheckCase::new("tanh", vec![uniform(&mut rng, 3, 3, -2.0, 2.0)], |t, v| {
            Ok(t.tanh(v[0]))
        }),
        // kept away from the kink at zero
        GradCheckCase::new(
            "relu",
            vec![uniform(&mut rng, 3, 3, 0.1, 1.0) * &uniform_sign(&mut rng, 3, 3)],
            |t, v| Ok(t.relu(v[0])),
        ),
        GradCheckCase::new(
            "affine",
            vec![uniform(&mut rng, 2, 2, -1.0, 1.0)],
            |t, v| Ok(t.affine(v[0], -1.7, 0.3)),
        ),
        GradCheckCase::new("powf", vec![uniform(&mut rng, 3, 2, 0.5, 2.0)], |t, v| {
            t.powf(v[0], -1.5)
        }),
        GradCheckCase::new(
            "normalize_rows",
            vec![uniform(&mut rng, 3, 4, 0.2, 1.0)],
            |t, v| t.normalize_rows(v[0]),
        ),
        GradCheckCase::new(
            "column_sums",
            vec![uniform(&mut rng, 3, 4, -1.0, 1.0)],
            |t, v| Ok(t.column_sums(v[0])),
        ),
        GradCheckCase::new("sum", vec![uniform(&mut rng, 3, 4, -1.0, 1.0)], |t, v| {
            Ok(t.sum(v[0]))
        }),
        GradCheckCase::new(
            "softmax_rows",
            vec![uniform(&mut rng, 3, 4, -2.0, 2.0)],
            |t, v| t.softmax_rows(v[0]),
        ),
        GradCheckCase::new(
            "log_softmax_rows",
            vec![uniform(&mut rng, 3, 4, -2.0, 2.0)],
            |t, v| t.log_softmax_rows(v[0]),
        ),
        GradCheckCase::new(
            "cross_entropy",
            vec![uniform(&mut rng, 3, 3, -2.0, 2.0)],
            move |t, v| t.cross_entropy(v[0], &targets),
        ),
        GradCheckCase::new(
            "kl_div",
            vec![
                row_stochastic(&mut rng, 3, 4),
                row_stochastic(&mut rng, 3, 4),
            ],
            |t, v| t.kl_div(v[0], v[1]),
        ),
        GradCheckCase::new(
            "squared_distance_rows",
            vec![
                uniform(&mut rng, 4, 3, -1.0, 1.0),
                uniform(&mut rng, 2, 3, -1.0, 1.0),
            ],
            |t, v| t.squared_distance_rows(v[0], v[1]),
        ),
        GradCheckCase::new(
            "scale_cols",
            vec![
                uniform(&mut rng, 3, 4, -1.0, 1.0),
                uniform(&mut rng, 1, 4, 0.5, 2.0),
            ],
            |t, v| t.scale_cols(v[0], v[1], 1e-8),
        ),
        GradCheckCase::new(
            "diag_sandwich",
            vec![
                uniform(&mut rng, 4, 4, 0.0, 1.0),
                uniform(&mut rng, 1, 4, 0.5, 2.0),
            ],
            |t, v| t.diag_sandwich(v[0], v[1], 1e-8),
        ),
        GradCheckCase::new(
            "reshape",
            vec![uniform(&mut rng, 2, 3, -1.0, 1.0)],
            |t, v| t.reshape(v[0], 1, 6),
        ),
        GradCheckCase::new(
            "concat_cols",
            vec![
                uniform(&mut rng, 2, 3, -1.0, 1.0),
                uniform(&mut rng, 2, 1, -1.0, 1.0),
            ],
            |t, v| t.concat_cols(&[v[0], v[1]]),
        ),
        GradCheckCase::new(
            "elementwise",
            vec![uniform(&mut rng, 2, 3, -1.0, 1.0)],
            |t, v| Ok(t.elementwise(v[0], f64::sin, f64::cos)),
        ),
    ];
    let weights = uniform(&mut rng, 3, 2, -1.0, 1.0);
    cases.push(GradCheckCase::new(
        "weighted_sum",
        vec![uniform(&mut rng, 3, 2, -1.0, 1.0)],
        move |t, v| t.weighted_sum(v[0], weights.clone()),
    ));
    cases
}

fn uniform_sign(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
}
