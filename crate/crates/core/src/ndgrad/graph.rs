use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{check_same_shape, logsumexp_rows, matmul_nt_raw, matmul_raw, matmul_tn_raw, softmax_rows, Tensor};
use crate::{Error, Result};

/// Identity of a node within one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Operations understood by [`Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    Add,
    /// Matrix plus a row vector broadcast over the rows (bias addition).
    AddRow,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Relu,
    Exp,
    Log,
    ClampMin(f64),
    Sum,
    Mean,
    SquaredNorm,
    Softmax,
    LogSumExp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    ClampMin(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SquaredNorm(NodeId),
    Softmax(NodeId),
    LogSumExp(NodeId),
    /// Mean over rows of `Σ_j t_ij · (lse_i − z_ij)`, i.e. cross-entropy of
    /// `softmax(z)` against constant targets `t`.
    SoftmaxCrossEntropy(NodeId, Rc<Tensor>),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracks_grad: bool,
    is_param: bool,
}

/// A single forward pass worth of differentiable computation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid reverse topological order. A graph is built for one step and
/// dropped after [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

/// Gradients keyed by parameter node.
#[derive(Debug, Default, Clone)]
pub struct GradientMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn of(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf whose gradient can be requested from [`Graph::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf, true, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf, false, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Rc<Tensor>, op: Op, tracks_grad: bool, is_param: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            value,
            op,
            tracks_grad,
            is_param,
        });
        Var { graph: self, id }
    }

    fn value_rc(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    fn tracks(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].tracks_grad
    }

    fn check_owner(&self, v: &Var<'_>) -> Result<NodeId> {
        if std::ptr::eq(self, v.graph) {
            Ok(v.id)
        } else {
            Err(Error::Contract("variable belongs to a different graph".into()))
        }
    }

    /// Applies `kind` to `inputs`, recording the edge for differentiation.
    pub fn apply<'g>(&'g self, kind: OpKind, inputs: &[Var<'g>]) -> Result<Var<'g>> {
        let arity = match kind {
            OpKind::Add | OpKind::AddRow | OpKind::Sub | OpKind::Mul | OpKind::MatMul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{kind:?} takes {arity} input(s), got {}",
                inputs.len()
            )));
        }
        let a = self.check_owner(&inputs[0])?;
        let b = match inputs.get(1) {
            Some(v) => Some(self.check_owner(v)?),
            None => None,
        };
        let av = self.value_rc(a);
        let (value, op) = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let b = b.expect("binary");
                let bv = self.value_rc(b);
                let (name, f, op): (_, fn(f64, f64) -> f64, _) = match kind {
                    OpKind::Add => ("add", |x, y| x + y, Op::Add(a, b)),
                    OpKind::Sub => ("sub", |x, y| x - y, Op::Sub(a, b)),
                    _ => ("mul", |x, y| x * y, Op::Mul(a, b)),
                };
                (av.zip_map(&bv, name, f)?, op)
            }
            OpKind::AddRow => {
                let b = b.expect("binary");
                let bv = self.value_rc(b);
                if av.shape().len() != 2 || bv.shape() != [av.cols()] {
                    return Err(Error::dim(
                        "add_row",
                        format!("{:?} + row {:?}", av.shape(), bv.shape()),
                    ));
                }
                let bias = bv.data();
                let data = av
                    .row_iter()
                    .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
                    .collect();
                (Tensor::from_parts(av.shape().to_vec(), data), Op::AddRow(a, b))
            }
            OpKind::Scale(s) => (av.map(|x| s * x), Op::Scale(a, s)),
            OpKind::MatMul => {
                let b = b.expect("binary");
                let bv = self.value_rc(b);
                let (sa, sb) = (av.shape(), bv.shape());
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
                }
                let (n, m, p) = (sa[0], sa[1], sb[1]);
                let data = matmul_raw(av.data(), bv.data(), n, m, p);
                (Tensor::from_parts(vec![n, p], data), Op::MatMul(a, b))
            }
            OpKind::Relu => (av.map(|x| x.max(0.0)), Op::Relu(a)),
            OpKind::Exp => (av.map(f64::exp), Op::Exp(a)),
            OpKind::Log => {
                if let Some(bad) = av.data().iter().find(|&&x| !(x > 0.0)) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                (av.map(f64::ln), Op::Log(a))
            }
            OpKind::ClampMin(floor) => (av.map(|x| x.max(floor)), Op::ClampMin(a, floor)),
            OpKind::Sum => (Tensor::scalar(av.sum()), Op::Sum(a)),
            OpKind::Mean => (Tensor::scalar(av.sum() / av.len() as f64), Op::Mean(a)),
            OpKind::SquaredNorm => (
                Tensor::scalar(av.data().iter().map(|x| x * x).sum()),
                Op::SquaredNorm(a),
            ),
            OpKind::Softmax => {
                if av.shape().is_empty() {
                    return Err(Error::dim("softmax", "scalar input"));
                }
                let data = softmax_rows(av.data(), av.cols());
                (Tensor::from_parts(av.shape().to_vec(), data), Op::Softmax(a))
            }
            OpKind::LogSumExp => {
                if av.shape().is_empty() {
                    return Err(Error::dim("logsumexp", "scalar input"));
                }
                let data = logsumexp_rows(av.data(), av.cols());
                let shape = av.shape()[..av.shape().len() - 1].to_vec();
                (Tensor::from_parts(shape, data), Op::LogSumExp(a))
            }
        };
        let tracks = self.tracks(a) || b.is_some_and(|b| self.tracks(b));
        Ok(self.push(Rc::new(value), op, tracks, false))
    }

    /// Fused softmax + cross-entropy against constant probability targets.
    ///
    /// Rows of `targets` may sum to anything; a zero row contributes nothing,
    /// which is how masked rows are expressed.
    pub fn softmax_cross_entropy<'g>(&'g self, logits: Var<'g>, targets: &Tensor) -> Result<Var<'g>> {
        let a = self.check_owner(&logits)?;
        let zv = self.value_rc(a);
        if zv.shape().len() != 2 {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits must be a matrix, got {:?}", zv.shape()),
            ));
        }
        check_same_shape("softmax_cross_entropy", &zv, targets)?;
        let lse = logsumexp_rows(zv.data(), zv.cols());
        let mut total = 0.0;
        for ((z, t), l) in zv.row_iter().zip(targets.row_iter()).zip(&lse) {
            total += z.iter().zip(t).map(|(zj, tj)| tj * (l - zj)).sum::<f64>();
        }
        let value = Tensor::scalar(total / zv.rows() as f64);
        let tracks = self.tracks(a);
        Ok(self.push(
            Rc::new(value),
            Op::SoftmaxCrossEntropy(a, Rc::new(targets.clone())),
            tracks,
            false,
        ))
    }

    /// Reverse-mode gradients of scalar `loss` with respect to `params`.
    pub fn backward(&self, loss: Var<'_>, params: &[Var<'_>]) -> Result<GradientMap> {
        let loss_id = self.check_owner(&loss)?;
        {
            let nodes = self.nodes.borrow();
            if !nodes[loss_id.0].value.is_scalar() {
                return Err(Error::Contract(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    nodes[loss_id.0].value.shape()
                )));
            }
            for p in params {
                let id = self.check_owner(p).map_err(|_| Error::MissingLeaf(p.id.0))?;
                let node = &nodes[id.0];
                if !node.is_param || !matches!(node.op, Op::Leaf) {
                    return Err(Error::MissingLeaf(id.0));
                }
            }
        }

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss_id.0 + 1);
        grads.resize_with(loss_id.0 + 1, || None);
        grads[loss_id.0] = Some(Tensor::full(nodes[loss_id.0].value.shape(), 1.0));

        for idx in (0..=loss_id.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.tracks_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }

        let mut out = GradientMap::default();
        for p in params {
            let g = grads[..]
                .get(p.id.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(nodes[p.id.0].value.shape()));
            out.grads.insert(p.id, g);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: NodeId, contribution: Tensor) {
    if !nodes[id.0].tracks_grad {
        return;
    }
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn val(nodes: &[Node], id: NodeId) -> &Tensor {
    &nodes[id.0].value
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &node.value;
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.clone());
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            if nodes[b.0].tracks_grad {
                let cols = g.cols();
                let mut col_sums = vec![0.0; cols];
                for row in g.row_iter() {
                    for (s, v) in col_sums.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                accumulate(grads, nodes, b, Tensor::from_parts(vec![cols], col_sums));
            }
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(nodes, a), val(nodes, b));
            if nodes[a.0].tracks_grad {
                accumulate(grads, nodes, a, g.zip_map(bv, "mul", |x, y| x * y).expect("shape"));
            }
            if nodes[b.0].tracks_grad {
                accumulate(grads, nodes, b, g.zip_map(av, "mul", |x, y| x * y).expect("shape"));
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, a, g.map(|x| s * x)),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(nodes, a), val(nodes, b));
            let (n, m, p) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[a.0].tracks_grad {
                let ga = matmul_nt_raw(g.data(), bv.data(), n, p, m);
                accumulate(grads, nodes, a, Tensor::from_parts(vec![n, m], ga));
            }
            if nodes[b.0].tracks_grad {
                let gb = matmul_tn_raw(av.data(), g.data(), n, m, p);
                accumulate(grads, nodes, b, Tensor::from_parts(vec![m, p], gb));
            }
        }
        Op::Relu(a) => {
            let av = val(nodes, a);
            let ga = g.zip_map(av, "relu", |gi, x| if x > 0.0 { gi } else { 0.0 });
            accumulate(grads, nodes, a, ga.expect("shape"));
        }
        Op::Exp(a) => {
            accumulate(grads, nodes, a, g.zip_map(out, "exp", |gi, y| gi * y).expect("shape"));
        }
        Op::Log(a) => {
            let av = val(nodes, a);
            accumulate(grads, nodes, a, g.zip_map(av, "log", |gi, x| gi / x).expect("shape"));
        }
        Op::ClampMin(a, floor) => {
            let av = val(nodes, a);
            let ga = g.zip_map(av, "clamp_min", |gi, x| if x >= floor { gi } else { 0.0 });
            accumulate(grads, nodes, a, ga.expect("shape"));
        }
        Op::Sum(a) => {
            let gs = g.data()[0];
            accumulate(grads, nodes, a, Tensor::full(val(nodes, a).shape(), gs));
        }
        Op::Mean(a) => {
            let av = val(nodes, a);
            let gs = g.data()[0] / av.len() as f64;
            accumulate(grads, nodes, a, Tensor::full(av.shape(), gs));
        }
        Op::SquaredNorm(a) => {
            let gs = g.data()[0];
            accumulate(grads, nodes, a, val(nodes, a).map(|x| 2.0 * gs * x));
        }
        Op::Softmax(a) => {
            let cols = out.cols();
            let mut ga = Vec::with_capacity(out.len());
            for (y, gy) in out.data().chunks_exact(cols).zip(g.data().chunks_exact(cols)) {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                ga.extend(y.iter().zip(gy).map(|(yi, gi)| yi * (gi - dot)));
            }
            accumulate(grads, nodes, a, Tensor::from_parts(out.shape().to_vec(), ga));
        }
        Op::LogSumExp(a) => {
            let av = val(nodes, a);
            let cols = av.cols();
            let probs = softmax_rows(av.data(), cols);
            let ga = probs
                .chunks_exact(cols)
                .zip(g.data())
                .flat_map(|(p, &gi)| p.iter().map(move |pj| gi * pj))
                .collect();
            accumulate(grads, nodes, a, Tensor::from_parts(av.shape().to_vec(), ga));
        }
        Op::SoftmaxCrossEntropy(a, ref targets) => {
            let zv = val(nodes, a);
            let cols = zv.cols();
            let scale = g.data()[0] / zv.rows() as f64;
            let probs = softmax_rows(zv.data(), cols);
            let mut ga = Vec::with_capacity(zv.len());
            for (p, t) in probs.chunks_exact(cols).zip(targets.row_iter()) {
                let mass: f64 = t.iter().sum();
                ga.extend(p.iter().zip(t).map(|(pj, tj)| scale * (mass * pj - tj)));
            }
            accumulate(grads, nodes, a, Tensor::from_parts(zv.shape().to_vec(), ga));
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Snapshot of the node's value.
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_rc(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id.0].value.shape().to_vec()
    }

    /// Value of a scalar node.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn unary(self, kind: OpKind) -> Var<'g> {
        self.graph
            .apply(kind, &[self])
            .expect("unary op on a tensor of this graph")
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Add, &[self, other])
    }

    pub fn add_row(self, row: Var<'g>) -> Result<Var<'g>> {
        self.graph.apply(OpKind::AddRow, &[self, row])
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Sub, &[self, other])
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Mul, &[self, other])
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.apply(OpKind::MatMul, &[self, other])
    }

    pub fn log(self) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Log, &[self])
    }

    pub fn softmax(self) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Softmax, &[self])
    }

    pub fn logsumexp(self) -> Result<Var<'g>> {
        self.graph.apply(OpKind::LogSumExp, &[self])
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.unary(OpKind::Scale(s))
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(OpKind::Relu)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(OpKind::Exp)
    }

    pub fn clamp_min(self, floor: f64) -> Var<'g> {
        self.unary(OpKind::ClampMin(floor))
    }

    pub fn sum(self) -> Var<'g> {
        self.unary(OpKind::Sum)
    }

    pub fn mean(self) -> Var<'g> {
        self.unary(OpKind::Mean)
    }

    pub fn squared_norm(self) -> Var<'g> {
        self.unary(OpKind::SquaredNorm)
    }

    pub fn softmax_cross_entropy(self, targets: &Tensor) -> Result<Var<'g>> {
        self.graph.softmax_cross_entropy(self, targets)
    }
}
