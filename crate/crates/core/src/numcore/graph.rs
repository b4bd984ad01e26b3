//! Reverse-mode differentiation over an explicit operation graph.
//!
//! A [`DiffGraph`] is built once through [`GraphBuilder`], then evaluated
//! repeatedly with different leaf values. Construction order is the
//! topological order: an operation can only reference node ids that were
//! returned earlier, so every input precedes its consumers by construction.
//! A forward pass owns its own [`Evaluation`] workspace, so a shared graph
//! can be evaluated from several threads at once.

use std::collections::HashMap;

use crate::error::{Result, SbiError};
use crate::numcore::array::Array;
use crate::numcore::linalg::cholesky;

pub type NodeId = usize;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone)]
pub enum Op {
    /// Named input or parameter leaf.
    Leaf(String),
    /// Value baked into the graph at construction; receives no gradient.
    Const(Array),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Square(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    /// Matrix [B×K] plus row vector [K], broadcast over rows.
    AddRow(NodeId, NodeId),
    /// Matrix [B×K] times row vector [K], broadcast over rows.
    MulRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// Re-interpret a contiguous range of the input's flat data.
    SliceFlat {
        input: NodeId,
        start: usize,
        shape: Vec<usize>,
    },
    SliceCols {
        input: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId, Vec<usize>),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    /// [B×K] -> [B], overflow-safe.
    LogSumExpRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Flattened inner product of two same-shape arrays -> scalar.
    Dot(NodeId, NodeId),
    /// Row-wise diagonal-Gaussian log density: all inputs [B×D] -> [B].
    DiagGaussLogDensityRows {
        x: NodeId,
        mean: NodeId,
        log_std: NodeId,
    },
    /// Multivariate-normal log density of `value` [M] under mean [M] and
    /// covariance [M×M]. The covariance is treated as a constant: no
    /// gradient flows to it.
    MvnLogDensity {
        value: NodeId,
        mean: NodeId,
        cov: NodeId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Square(..) => "square",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MatMul(..) => "matmul",
            Op::SliceFlat { .. } => "slice_flat",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::Dot(..) => "dot",
            Op::DiagGaussLogDensityRows { .. } => "diag_gauss_log_density",
            Op::MvnLogDensity { .. } => "mvn_log_density",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Immutable computation graph with named leaves and a single output node.
#[derive(Debug, Clone)]
pub struct DiffGraph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    output: NodeId,
}

/// Incremental graph construction. Node ids are issued in topological order.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn constant(&mut self, arr: Array) -> NodeId {
        let shape = arr.shape().to_vec();
        self.push(Op::Const(arr), shape)
    }

    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> NodeId {
        assert!(
            !self.leaves.contains_key(name),
            "duplicate leaf `{name}`"
        );
        let id = self.push(Op::Leaf(name.to_string()), shape.to_vec());
        self.leaves.insert(name.to_string(), id);
        id
    }

    fn binary_same_shape(&mut self, op: fn(NodeId, NodeId) -> Op, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape");
        let shape = self.shape(a).to_vec();
        self.push(op(a, b), shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(Op::Mul, a, b)
    }

    fn unary(&mut self, op: fn(NodeId) -> Op, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(op(a), shape)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Neg, a)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Square, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh, a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus, a)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), shape)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::AddConst(a, c), shape)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa.len(), 2, "add_row expects a matrix");
        assert_eq!(self.shape(row), &sa[1..], "add_row vector length");
        self.push(Op::AddRow(a, row), sa)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa.len(), 2, "mul_row expects a matrix");
        assert_eq!(self.shape(row), &sa[1..], "mul_row vector length");
        self.push(Op::MulRow(a, row), sa)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[0], "matmul inner dim");
        self.push(Op::MatMul(a, b), vec![sa[0], sb[1]])
    }

    pub fn slice_flat(&mut self, input: NodeId, start: usize, shape: &[usize]) -> NodeId {
        let n: usize = shape.iter().product();
        let total: usize = self.shape(input).iter().product();
        assert!(start + n <= total, "slice_flat out of range");
        self.push(
            Op::SliceFlat { input, start, shape: shape.to_vec() },
            shape.to_vec(),
        )
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.shape(input).to_vec();
        assert_eq!(s.len(), 2);
        assert!(start + len <= s[1], "slice_cols out of range");
        self.push(Op::SliceCols { input, start, len }, vec![s[0], len])
    }

    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> NodeId {
        assert!(!inputs.is_empty());
        let rows = self.shape(inputs[0])[0];
        let mut cols = 0;
        for &id in inputs {
            let s = self.shape(id);
            assert_eq!(s[0], rows, "concat_cols row count");
            cols += if s.len() == 2 { s[1] } else { 1 };
        }
        self.push(Op::ConcatCols(inputs.to_vec()), vec![rows, cols])
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> NodeId {
        let n: usize = shape.iter().product();
        let total: usize = self.shape(input).iter().product();
        assert_eq!(n, total, "reshape size");
        self.push(Op::Reshape(input, shape.to_vec()), shape.to_vec())
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        self.push(Op::SoftmaxRows(a), s)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        self.push(Op::LogSoftmaxRows(a), s)
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        self.push(Op::LogSumExpRows(a), vec![s[0]])
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a), vec![])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanAll(a), vec![])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "dot shape");
        self.push(Op::Dot(a, b), vec![])
    }

    pub fn diag_gauss_log_density_rows(
        &mut self,
        x: NodeId,
        mean: NodeId,
        log_std: NodeId,
    ) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        assert_eq!(self.shape(mean), &s[..]);
        assert_eq!(self.shape(log_std), &s[..]);
        self.push(Op::DiagGaussLogDensityRows { x, mean, log_std }, vec![s[0]])
    }

    pub fn mvn_log_density(&mut self, value: NodeId, mean: NodeId, cov: NodeId) -> NodeId {
        let m = self.shape(value).to_vec();
        assert_eq!(m.len(), 1);
        assert_eq!(self.shape(mean), &m[..]);
        assert_eq!(self.shape(cov), &[m[0], m[0]]);
        self.push(Op::MvnLogDensity { value, mean, cov }, vec![])
    }

    /// Finish the graph with the given output node.
    pub fn finish(self, output: NodeId) -> DiffGraph {
        assert!(output < self.nodes.len());
        DiffGraph { nodes: self.nodes, leaves: self.leaves, output }
    }
}

/// Per-evaluation workspace: node values plus auxiliary state for backward.
pub struct Evaluation {
    values: Vec<Array>,
    /// MvnLogDensity solves Σ⁻¹(v−μ) during forward; kept for backward.
    mvn_alpha: HashMap<NodeId, Vec<f64>>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Array {
        &self.values[id]
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl DiffGraph {
    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &String> {
        self.leaves.keys()
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn leaf_shape(&self, name: &str) -> Option<&[usize]> {
        self.leaves.get(name).map(|&id| self.nodes[id].shape.as_slice())
    }

    /// Evaluate the graph. Returns the workspace; the output value is
    /// `eval.value(graph.output())`.
    pub fn forward(&self, inputs: &HashMap<String, Array>) -> Result<Evaluation> {
        for name in inputs.keys() {
            if !self.leaves.contains_key(name) {
                return Err(SbiError::UnknownInput(name.clone()));
            }
        }
        let mut values: Vec<Array> = Vec::with_capacity(self.nodes.len());
        let mut mvn_alpha = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Leaf(name) => {
                    let arr = inputs
                        .get(name)
                        .ok_or_else(|| SbiError::MissingInput(name.clone()))?;
                    if arr.shape() != node.shape.as_slice() {
                        return Err(SbiError::ShapeMismatch {
                            context: format!("leaf `{name}` (node {id})"),
                            expected: node.shape.clone(),
                            got: arr.shape().to_vec(),
                        });
                    }
                    arr.clone()
                }
                Op::Const(arr) => arr.clone(),
                Op::Add(a, b) => values[*a].zip(&values[*b], |x, y| x + y),
                Op::Sub(a, b) => values[*a].zip(&values[*b], |x, y| x - y),
                Op::Mul(a, b) => values[*a].zip(&values[*b], |x, y| x * y),
                Op::Neg(a) => values[*a].map(|x| -x),
                Op::Square(a) => values[*a].map(|x| x * x),
                Op::Exp(a) => values[*a].map(f64::exp),
                Op::Log(a) => values[*a].map(f64::ln),
                Op::Tanh(a) => values[*a].map(f64::tanh),
                Op::Relu(a) => values[*a].map(|x| x.max(0.0)),
                Op::Softplus(a) => values[*a].map(softplus),
                Op::Scale(a, c) => values[*a].map(|x| x * c),
                Op::AddConst(a, c) => values[*a].map(|x| x + c),
                Op::AddRow(a, r) => {
                    let m = &values[*a];
                    let row = values[*r].data();
                    let k = m.cols();
                    let mut out = m.clone();
                    for (i, v) in out.data_mut().iter_mut().enumerate() {
                        *v += row[i % k];
                    }
                    out
                }
                Op::MulRow(a, r) => {
                    let m = &values[*a];
                    let row = values[*r].data();
                    let k = m.cols();
                    let mut out = m.clone();
                    for (i, v) in out.data_mut().iter_mut().enumerate() {
                        *v *= row[i % k];
                    }
                    out
                }
                Op::MatMul(a, b) => values[*a].matmul(&values[*b]),
                Op::SliceFlat { input, start, shape } => {
                    let n: usize = shape.iter().product();
                    let src = &values[*input].data()[*start..start + n];
                    Array::new(shape.clone(), src.to_vec()).expect("slice_flat shape")
                }
                Op::SliceCols { input, start, len } => {
                    let m = &values[*input];
                    let (rows, cols) = (m.rows(), m.cols());
                    let mut out = Vec::with_capacity(rows * len);
                    for i in 0..rows {
                        out.extend_from_slice(&m.data()[i * cols + start..i * cols + start + len]);
                    }
                    Array::matrix(rows, *len, out)
                }
                Op::ConcatCols(ids) => {
                    let rows = values[ids[0]].rows();
                    let total: usize = ids.iter().map(|&i| values[i].cols()).sum();
                    let mut out = Vec::with_capacity(rows * total);
                    for i in 0..rows {
                        for &id in ids {
                            let src = &values[id];
                            let c = src.cols();
                            out.extend_from_slice(&src.data()[i * c..(i + 1) * c]);
                        }
                    }
                    Array::matrix(rows, total, out)
                }
                Op::Reshape(a, shape) => values[*a].reshaped(shape.clone()),
                Op::SoftmaxRows(a) => {
                    let m = &values[*a];
                    let mut out = m.clone();
                    let k = m.cols();
                    for i in 0..m.rows() {
                        let row = &mut out.data_mut()[i * k..(i + 1) * k];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut s = 0.0;
                        for v in row.iter_mut() {
                            *v = (*v - mx).exp();
                            s += *v;
                        }
                        for v in row.iter_mut() {
                            *v /= s;
                        }
                    }
                    out
                }
                Op::LogSoftmaxRows(a) => {
                    let m = &values[*a];
                    let mut out = m.clone();
                    let k = m.cols();
                    for i in 0..m.rows() {
                        let row = &mut out.data_mut()[i * k..(i + 1) * k];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
                        for v in row.iter_mut() {
                            *v -= lse;
                        }
                    }
                    out
                }
                Op::LogSumExpRows(a) => {
                    let m = &values[*a];
                    let k = m.cols();
                    let mut out = Vec::with_capacity(m.rows());
                    for i in 0..m.rows() {
                        out.push(crate::numcore::array::logsumexp(
                            &m.data()[i * k..(i + 1) * k],
                        ));
                    }
                    Array::vector(out)
                }
                Op::SumAll(a) => Array::scalar(values[*a].sum()),
                Op::MeanAll(a) => Array::scalar(values[*a].sum() / values[*a].len() as f64),
                Op::Dot(a, b) => Array::scalar(
                    values[*a]
                        .data()
                        .iter()
                        .zip(values[*b].data())
                        .map(|(x, y)| x * y)
                        .sum(),
                ),
                Op::DiagGaussLogDensityRows { x, mean, log_std } => {
                    let xv = &values[*x];
                    let mv = &values[*mean];
                    let lv = &values[*log_std];
                    let d = xv.cols();
                    let mut out = Vec::with_capacity(xv.rows());
                    for i in 0..xv.rows() {
                        let mut acc = -0.5 * d as f64 * LN_2PI;
                        for j in 0..d {
                            let ls = lv.get2(i, j);
                            let z = (xv.get2(i, j) - mv.get2(i, j)) * (-ls).exp();
                            acc += -ls - 0.5 * z * z;
                        }
                        out.push(acc);
                    }
                    Array::vector(out)
                }
                Op::MvnLogDensity { value, mean, cov } => {
                    let v = values[*value].data();
                    let mu = values[*mean].data();
                    let m = v.len();
                    let chol = cholesky(&values[*cov]).map_err(|e| {
                        SbiError::CholeskyFailure(format!("node {id}: {e}"))
                    })?;
                    let diff: Vec<f64> = v.iter().zip(mu).map(|(a, b)| a - b).collect();
                    let alpha = chol.solve(&diff);
                    let quad: f64 = diff.iter().zip(&alpha).map(|(a, b)| a * b).sum();
                    let out = -0.5 * quad - chol.log_det_sqrt() - 0.5 * m as f64 * LN_2PI;
                    mvn_alpha.insert(id, alpha);
                    Array::scalar(out)
                }
            };
            values.push(v);
        }
        Ok(Evaluation { values, mvn_alpha })
    }

    /// Value of the output node after [`forward`](Self::forward).
    pub fn output_value<'a>(&self, eval: &'a Evaluation) -> &'a Array {
        &eval.values[self.output]
    }

    /// Propagate `seed` (d output / d output) back through the graph.
    /// Requires a scalar output. Returns a gradient per leaf, each the
    /// same shape as the leaf.
    pub fn backward(&self, eval: &Evaluation, seed: f64) -> Result<HashMap<String, Array>> {
        if !self.nodes[self.output].shape.is_empty() {
            return Err(SbiError::InvalidArgument(
                "backward requires a scalar output".into(),
            ));
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(Array::scalar(seed));

        let acc = |g: &mut Option<Array>, shape: &[usize], add: &dyn Fn(&mut [f64])| {
            let arr = g.get_or_insert_with(|| Array::zeros(shape));
            add(arr.data_mut());
        };

        for id in (0..self.nodes.len()).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf(_) => {
                    grads[id] = Some(g);
                }
                Op::Const(_) => {}
                Op::Add(a, b) => {
                    for &t in &[*a, *b] {
                        let shape = self.nodes[t].shape.clone();
                        acc(&mut grads[t], &shape, &|d| {
                            for (x, y) in d.iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        });
                    }
                }
                Op::Sub(a, b) => {
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for (x, y) in d.iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    });
                    let sb = self.nodes[*b].shape.clone();
                    acc(&mut grads[*b], &sb, &|d| {
                        for (x, y) in d.iter_mut().zip(g.data()) {
                            *x -= y;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (eval.values[*a].clone(), eval.values[*b].clone());
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for ((x, y), z) in d.iter_mut().zip(g.data()).zip(vb.data()) {
                            *x += y * z;
                        }
                    });
                    let sb = self.nodes[*b].shape.clone();
                    acc(&mut grads[*b], &sb, &|d| {
                        for ((x, y), z) in d.iter_mut().zip(g.data()).zip(va.data()) {
                            *x += y * z;
                        }
                    });
                }
                Op::Neg(a) => {
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for (x, y) in d.iter_mut().zip(g.data()) {
                            *x -= y;
                        }
                    });
                }
                Op::Square(a) => {
                    let va = eval.values[*a].clone();
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for ((x, y), z) in d.iter_mut().zip(g.data()).zip(va.data()) {
                            *x += 2.0 * y * z;
                        }
                    });
                }
                Op::Exp(a) => {
                    let vy = eval.values[id].clone();
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for ((x, y), z) in d.iter_mut().zip(g.data()).zip(vy.data()) {
                            *x += y * z;
                        }
                    });
                }
                Op::Log(a) => {
                    let va = eval.values[*a].clone();
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for ((x, y), z) in d.iter_mut().zip(g.data()).zip(va.data()) {
                            *x += y / z;
                        }
                    });
                }
                Op::Tanh(a) => {
                    let vy = eval.values[id].clone();
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for ((x, y), z) in d.iter_mut().zip(g.data()).zip(vy.data()) {
                            *x += y * (1.0 - z * z);
                        }
                    });
                }
                Op::Relu(a) => {
                    let va = eval.values[*a].clone();
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for ((x, y), z) in d.iter_mut().zip(g.data()).zip(va.data()) {
                            if *z > 0.0 {
                                *x += y;
                            }
                        }
                    });
                }
                Op::Softplus(a) => {
                    let va = eval.values[*a].clone();
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for ((x, y), z) in d.iter_mut().zip(g.data()).zip(va.data()) {
                            *x += y * sigmoid(*z);
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for (x, y) in d.iter_mut().zip(g.data()) {
                            *x += y * c;
                        }
                    });
                }
                Op::AddConst(a, _) => {
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for (x, y) in d.iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    });
                }
                Op::AddRow(a, r) => {
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for (x, y) in d.iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    });
                    let k = self.nodes[*r].shape[0];
                    let sr = self.nodes[*r].shape.clone();
                    acc(&mut grads[*r], &sr, &|d| {
                        for (i, y) in g.data().iter().enumerate() {
                            d[i % k] += y;
                        }
                    });
                }
                Op::MulRow(a, r) => {
                    let va = eval.values[*a].clone();
                    let vr = eval.values[*r].clone();
                    let k = self.nodes[*r].shape[0];
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for (i, (x, y)) in d.iter_mut().zip(g.data()).enumerate() {
                            *x += y * vr.data()[i % k];
                        }
                    });
                    let sr = self.nodes[*r].shape.clone();
                    acc(&mut grads[*r], &sr, &|d| {
                        for (i, y) in g.data().iter().enumerate() {
                            d[i % k] += y * va.data()[i];
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&eval.values[*b].transpose());
                    let gb = eval.values[*a].transpose().matmul(&g);
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for (x, y) in d.iter_mut().zip(ga.data()) {
                            *x += y;
                        }
                    });
                    let sb = self.nodes[*b].shape.clone();
                    acc(&mut grads[*b], &sb, &|d| {
                        for (x, y) in d.iter_mut().zip(gb.data()) {
                            *x += y;
                        }
                    });
                }
                Op::SliceFlat { input, start, shape } => {
                    let n: usize = shape.iter().product();
                    let start = *start;
                    let si = self.nodes[*input].shape.clone();
                    acc(&mut grads[*input], &si, &|d| {
                        for (x, y) in d[start..start + n].iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    });
                }
                Op::SliceCols { input, start, len } => {
                    let cols = self.nodes[*input].shape[1];
                    let (start, len) = (*start, *len);
                    let si = self.nodes[*input].shape.clone();
                    acc(&mut grads[*input], &si, &|d| {
                        for (i, y) in g.data().iter().enumerate() {
                            let (r, c) = (i / len, i % len);
                            d[r * cols + start + c] += y;
                        }
                    });
                }
                Op::ConcatCols(ids) => {
                    let rows = self.nodes[id].shape[0];
                    let total = self.nodes[id].shape[1];
                    let mut offset = 0;
                    for &src in ids {
                        let c = if self.nodes[src].shape.len() == 2 {
                            self.nodes[src].shape[1]
                        } else {
                            1
                        };
                        let off = offset;
                        let ss = self.nodes[src].shape.clone();
                        acc(&mut grads[src], &ss, &|d| {
                            for i in 0..rows {
                                for j in 0..c {
                                    d[i * c + j] += g.data()[i * total + off + j];
                                }
                            }
                        });
                        offset += c;
                    }
                }
                Op::Reshape(a, _) => {
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for (x, y) in d.iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let y = eval.values[id].clone();
                    let k = y.cols();
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for i in 0..y.rows() {
                            let yr = &y.data()[i * k..(i + 1) * k];
                            let gr = &g.data()[i * k..(i + 1) * k];
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for j in 0..k {
                                d[i * k + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmaxRows(a) => {
                    let y = eval.values[id].clone();
                    let k = y.cols();
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for i in 0..y.rows() {
                            let yr = &y.data()[i * k..(i + 1) * k];
                            let gr = &g.data()[i * k..(i + 1) * k];
                            let gsum: f64 = gr.iter().sum();
                            for j in 0..k {
                                d[i * k + j] += gr[j] - yr[j].exp() * gsum;
                            }
                        }
                    });
                }
                Op::LogSumExpRows(a) => {
                    let va = eval.values[*a].clone();
                    let vy = eval.values[id].clone();
                    let k = va.cols();
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for i in 0..va.rows() {
                            let gi = g.data()[i];
                            let lse = vy.data()[i];
                            for j in 0..k {
                                d[i * k + j] += gi * (va.get2(i, j) - lse).exp();
                            }
                        }
                    });
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for x in d.iter_mut() {
                            *x += gv;
                        }
                    });
                }
                Op::MeanAll(a) => {
                    let n = eval.values[*a].len() as f64;
                    let gv = g.item() / n;
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for x in d.iter_mut() {
                            *x += gv;
                        }
                    });
                }
                Op::Dot(a, b) => {
                    let gv = g.item();
                    let (va, vb) = (eval.values[*a].clone(), eval.values[*b].clone());
                    let sa = self.nodes[*a].shape.clone();
                    acc(&mut grads[*a], &sa, &|d| {
                        for (x, y) in d.iter_mut().zip(vb.data()) {
                            *x += gv * y;
                        }
                    });
                    let sb = self.nodes[*b].shape.clone();
                    acc(&mut grads[*b], &sb, &|d| {
                        for (x, y) in d.iter_mut().zip(va.data()) {
                            *x += gv * y;
                        }
                    });
                }
                Op::DiagGaussLogDensityRows { x, mean, log_std } => {
                    let xv = eval.values[*x].clone();
                    let mv = eval.values[*mean].clone();
                    let lv = eval.values[*log_std].clone();
                    let d_ = xv.cols();
                    let sx = self.nodes[*x].shape.clone();
                    let gx: Vec<f64> = (0..xv.len())
                        .map(|idx| {
                            let (i, j) = (idx / d_, idx % d_);
                            let ls = lv.get2(i, j);
                            let z = (xv.get2(i, j) - mv.get2(i, j)) * (-2.0 * ls).exp();
                            -g.data()[i] * z
                        })
                        .collect();
                    acc(&mut grads[*x], &sx, &|d| {
                        for (x_, y) in d.iter_mut().zip(&gx) {
                            *x_ += y;
                        }
                    });
                    let sm = self.nodes[*mean].shape.clone();
                    acc(&mut grads[*mean], &sm, &|d| {
                        for (x_, y) in d.iter_mut().zip(&gx) {
                            *x_ -= y;
                        }
                    });
                    let sl = self.nodes[*log_std].shape.clone();
                    acc(&mut grads[*log_std], &sl, &|d| {
                        for idx in 0..xv.len() {
                            let (i, j) = (idx / d_, idx % d_);
                            let ls = lv.get2(i, j);
                            let diff = xv.get2(i, j) - mv.get2(i, j);
                            let z2 = diff * diff * (-2.0 * ls).exp();
                            d[idx] += g.data()[i] * (z2 - 1.0);
                        }
                    });
                }
                Op::MvnLogDensity { value, mean, .. } => {
                    let gv = g.item();
                    let alpha = eval.mvn_alpha[&id].clone();
                    let sv = self.nodes[*value].shape.clone();
                    acc(&mut grads[*value], &sv, &|d| {
                        for (x, a) in d.iter_mut().zip(&alpha) {
                            *x -= gv * a;
                        }
                    });
                    let sm = self.nodes[*mean].shape.clone();
                    acc(&mut grads[*mean], &sm, &|d| {
                        for (x, a) in d.iter_mut().zip(&alpha) {
                            *x += gv * a;
                        }
                    });
                }
            }
        }

        let mut out = HashMap::new();
        for (name, &id) in &self.leaves {
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Array::zeros(&self.nodes[id].shape));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    pub fn node_op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id].op.name()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per-leaf maximum scaled error.
    pub per_leaf: Vec<(String, f64)>,
    pub tol: f64,
    pub pass: bool,
}

/// Scaled error between an analytic and a numeric gradient component:
/// relative where the magnitudes allow it, with a 1e-6 absolute floor
/// folded in so near-zero gradients are judged absolutely.
pub fn gradient_error(analytic: f64, numeric: f64, tol: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6 / tol);
    (analytic - numeric).abs() / denom
}

/// Compare full gradient arrays; returns the max scaled error.
pub fn compare_gradients(analytic: &Array, numeric: &Array, tol: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| gradient_error(a, n, tol))
        .fold(0.0, f64::max)
}

/// Check every leaf's backward gradient against central finite differences
/// (h = 1e-5) on the scalar graph output.
pub fn check_gradients(
    graph: &DiffGraph,
    inputs: &HashMap<String, Array>,
    tol: f64,
) -> Result<GradCheckReport> {
    let h = 1e-5;
    let eval = graph.forward(inputs)?;
    let grads = graph.backward(&eval, 1.0)?;

    let mut per_leaf = Vec::new();
    let mut names: Vec<&String> = inputs.keys().collect();
    names.sort();
    for name in names {
        let base = &inputs[name];
        let mut numeric = Array::zeros(base.shape());
        for i in 0..base.len() {
            let mut probe = inputs.clone();
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            probe.insert(name.clone(), plus);
            let fp = graph.output_value(&graph.forward(&probe)?).item();
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            probe.insert(name.clone(), minus);
            let fm = graph.output_value(&graph.forward(&probe)?).item();
            numeric.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        let err = compare_gradients(&grads[name], &numeric, tol);
        per_leaf.push((name.clone(), err));
    }
    let pass = per_leaf.iter().all(|(_, e)| *e < tol);
    Ok(GradCheckReport { per_leaf, tol, pass })
}
