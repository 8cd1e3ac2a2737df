//! Recorded computation graph over dense `f64` matrices with exact
//! reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. [`Graph::backward`]
//! walks the nodes in reverse insertion order, which is a valid topological
//! order since a node can only reference earlier nodes.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param { name: String, trainable: bool },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Array2<f64>),
    Relu(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Array2<f64>, inv_std: Array1<f64> },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    Sum(NodeId),
    WeightedSqError { pred: NodeId, target: Array2<f64>, weights: Vec<f64> },
    SmoothedNll { logp: NodeId, targets: Vec<Option<usize>>, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node.
pub struct NodeGrads {
    grads: Vec<Option<Array2<f64>>>,
}

impl NodeGrads {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, name: &str, value: Array2<f64>, trainable: bool) -> NodeId {
        self.push(value, Op::Param { name: name.to_string(), trainable })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a + row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, c: Array2<f64>) -> NodeId {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / n;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Row-wise softmax. Entries equal to `-inf` get probability zero; a row
    /// with no finite entry becomes all zeros.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.fill(0.0);
                continue;
            }
            row.mapv_inplace(|x| (x - max).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, table: NodeId, rows: &[usize]) -> NodeId {
        let v = self.value(table).select(Axis(0), rows);
        self.push(v, Op::GatherRows(table, rows.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// `Σ_t weights[t] · ‖pred_t − target_t‖²` as a `1 × 1` node.
    pub fn weighted_sq_error(&mut self, pred: NodeId, target: Array2<f64>, weights: Vec<f64>) -> NodeId {
        assert_eq!(self.value(pred).dim(), target.dim(), "prediction and target shapes differ");
        assert_eq!(weights.len(), target.nrows(), "one weight per row required");
        let v = weighted_sq_error_value(self.value(pred), &target, &weights);
        self.push(Array2::from_elem((1, 1), v), Op::WeightedSqError { pred, target, weights })
    }

    /// Sum over non-`None` rows of `−Σ_v q_v · logp_v` with
    /// `q = (1 − eps)·onehot(target) + eps/V`.
    pub fn smoothed_nll(&mut self, logp: NodeId, targets: Vec<Option<usize>>, eps: f64) -> NodeId {
        assert_eq!(self.value(logp).nrows(), targets.len(), "one target per row required");
        let v = smoothed_nll_value(self.value(logp), &targets, eps);
        self.push(Array2::from_elem((1, 1), v), Op::SmoothedNll { logp, targets, eps })
    }

    pub fn backward(&self, loss: NodeId) -> Result<NodeGrads> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called on a node that was never computed".into()));
        }
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::State("backward requires a scalar loss node".into()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
            match &mut grads[id.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param { .. } => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::MulConst(a, c) => acc(&mut grads, *a, &g * c),
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gam = self.value(*gamma);
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let gxhat = &g * gam;
                    let n = xhat.ncols() as f64;
                    let mean_g = gxhat.sum_axis(Axis(1)) / n;
                    let mean_gx = (&gxhat * xhat).sum_axis(Axis(1)) / n;
                    let gx = (gxhat - &mean_g.insert_axis(Axis(1)) - xhat * &mean_gx.insert_axis(Axis(1)))
                        * inv_std.view().insert_axis(Axis(1));
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let dot = (&g * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, p * &(&g - &dot));
                }
                Op::LogSoftmax(a) => {
                    let p = node.value.mapv(f64::exp);
                    let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, &g - &(p * &total));
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Array2::zeros(src.raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::GatherRows(table, rows) => {
                    let mut gt = Array2::zeros(self.value(*table).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gt.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::WeightedSqError { pred, target, weights } => {
                    let scale = 2.0 * g[[0, 0]];
                    let mut gp = self.value(*pred) - target;
                    for (mut row, &w) in gp.rows_mut().into_iter().zip(weights) {
                        row *= scale * w;
                    }
                    acc(&mut grads, *pred, gp);
                }
                Op::SmoothedNll { logp, targets, eps } => {
                    let lp = self.value(*logp);
                    let v = lp.ncols() as f64;
                    let gs = g[[0, 0]];
                    let mut gl = Array2::zeros(lp.raw_dim());
                    for (mut row, t) in gl.rows_mut().into_iter().zip(targets) {
                        if let Some(t) = *t {
                            row.fill(-gs * eps / v);
                            row[t] -= gs * (1.0 - eps);
                        }
                    }
                    acc(&mut grads, *logp, gl);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    /// Gradients of every trainable parameter leaf, keyed by name. Leaves the
    /// loss does not depend on get zero gradients.
    pub fn param_grads(&self, grads: &NodeGrads) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { name, trainable: true } = &node.op {
                let g = grads
                    .get(NodeId(i))
                    .map(|g| g.as_standard_layout().into_owned())
                    .unwrap_or_else(|| Array2::zeros(node.value.raw_dim()));
                match out.get_mut(name) {
                    Some(existing) => *existing += &g,
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn weighted_sq_error_value(pred: &Array2<f64>, target: &Array2<f64>, weights: &[f64]) -> f64 {
    pred.rows()
        .into_iter()
        .zip(target.rows())
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|((p, t), &w)| w * p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

pub(crate) fn smoothed_nll_value(logp: &Array2<f64>, targets: &[Option<usize>], eps: f64) -> f64 {
    let v = logp.ncols() as f64;
    logp.rows()
        .into_iter()
        .zip(targets)
        .filter_map(|(row, t)| t.map(|t| (row, t)))
        .map(|(row, t)| -((1.0 - eps) * row[t] + eps / v * row.sum()))
        .sum()
}
