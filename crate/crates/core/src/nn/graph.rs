//! Tape-based reverse-mode differentiation over dense 2-D matrices.
//!
//! Every value is an `Array2<f64>`; vectors are `1×n` rows. Nodes are appended
//! in evaluation order so a reverse sweep over the tape is a valid
//! topological order for backpropagation.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Axis, Zip};

use super::params::ParamStore;

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    MeanRows(NodeId),
    /// Scalar whose value and input gradient were computed outside the tape.
    External { input: NodeId, grad: Mat },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: BTreeMap<String, Mat>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    /// Gradients of every parameter touched by the forward pass.
    pub fn params(&self) -> &BTreeMap<String, Mat> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Mat> {
        self.params
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.leaf(value, false)
    }

    /// Leaf for a named parameter; repeated calls return the same node.
    /// Parameters of a frozen store are recorded without gradient tracking.
    ///
    /// Panics if the store lacks `name`: parameter names are fixed by model
    /// construction, so a miss is a programming error.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        if let Some(id) = self.params.get(name) {
            return *id;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        let id = self.leaf(value, !store.is_frozen());
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.value(row).nrows(), 1, "add_row: expected a 1×n row");
        let v = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) * s;
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation with `1×n` scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let v = &(&xhat * self.value(gamma)) + self.value(beta);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row `i` of the result is row `idx[i]` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(a).select(Axis(0), idx);
        let rg = self.rg(&[a]);
        self.push(v, Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanRows(a), rg)
    }

    /// Attaches a scalar loss evaluated outside the tape. `grad` is the
    /// derivative of `value` with respect to `input`.
    pub fn external_loss(&mut self, input: NodeId, value: f64, grad: Mat) -> NodeId {
        assert_eq!(self.value(input).dim(), grad.dim(), "external_loss: grad shape");
        let rg = self.rg(&[input]);
        self.push(
            Array2::from_elem((1, 1), value),
            Op::External { input, grad },
            rg,
        )
    }

    /// Backpropagates from the `1×1` node `root`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(gy);
                continue;
            }
            let acc = |id: NodeId, g: Mat, grads: &mut Vec<Option<Mat>>| {
                if !self.nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, gy.dot(&self.value(*b).t()), &mut grads);
                    acc(*b, self.value(*a).t().dot(&gy), &mut grads);
                }
                Op::Transpose(a) => acc(*a, gy.t().to_owned(), &mut grads),
                Op::Add(a, b) => {
                    acc(*a, gy.clone(), &mut grads);
                    acc(*b, gy.clone(), &mut grads);
                }
                Op::AddRow(a, row) => {
                    acc(*row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    acc(*a, gy.clone(), &mut grads);
                }
                Op::Mul(a, b) => {
                    acc(*a, &gy * self.value(*b), &mut grads);
                    acc(*b, &gy * self.value(*a), &mut grads);
                }
                Op::Scale(a, s) => acc(*a, &gy * *s, &mut grads),
                Op::Gelu(a) => {
                    let mut g = self.value(*a).mapv(gelu_grad);
                    g *= &gy;
                    acc(*a, g, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut g = y.mapv(|v| v * (1.0 - v));
                    g *= &gy;
                    acc(*a, g, &mut grads);
                }
                Op::Tanh(a) => {
                    let mut g = node.value.mapv(|v| 1.0 - v * v);
                    g *= &gy;
                    acc(*a, g, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut g = &gy * y;
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.sum();
                        Zip::from(&mut grow).and(&yrow).for_each(|gv, &yv| *gv -= yv * dot);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    acc(*beta, gy.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    acc(
                        *gamma,
                        (&gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        &mut grads,
                    );
                    if self.nodes[x.0].requires_grad {
                        let dxhat = &gy * self.value(*gamma);
                        let n = xhat.ncols() as f64;
                        let mut dx = dxhat.clone();
                        for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                            let xr = xhat.row(r);
                            let dr = dxhat.row(r);
                            let mean_d = dr.sum() / n;
                            let mean_dx = dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                            Zip::from(&mut row).and(&xr).for_each(|v, &xh| {
                                *v = inv_std[r] * (*v - mean_d - xh * mean_dx);
                            });
                        }
                        acc(*x, dx, &mut grads);
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut g = Array2::zeros(self.value(*a).dim());
                    g.slice_mut(s![.., *start..*start + gy.ncols()]).assign(&gy);
                    acc(*a, g, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(*p, gy.slice(s![.., off..off + w]).to_owned(), &mut grads);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        acc(*p, gy.slice(s![off..off + h, ..]).to_owned(), &mut grads);
                        off += h;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let mut g = Array2::zeros(self.value(*a).dim());
                    for (i, &src) in idx.iter().enumerate() {
                        let mut row = g.row_mut(src);
                        row += &gy.row(i);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::MeanRows(a) => {
                    let (n, m) = self.value(*a).dim();
                    let row = &gy / n as f64;
                    let g = row.broadcast((n, m)).expect("broadcast").to_owned();
                    acc(*a, g, &mut grads);
                }
                Op::External { input, grad } => acc(*input, grad * gy[[0, 0]], &mut grads),
            }
            grads[i] = Some(gy);
        }

        let params = self
            .params
            .iter()
            .filter_map(|(name, id)| grads[id.0].clone().map(|g| (name.clone(), g)))
            .collect();
        Gradients { grads, params }
    }
}
