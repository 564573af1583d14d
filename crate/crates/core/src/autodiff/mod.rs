//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`CompGraph`] is a topologically ordered list of primitive operations
//! over named leaf tensors. Leaves are either trainable parameters or plain
//! inputs; everything stochastic (bottleneck masks, noise draws) enters the
//! graph as an input binding, so evaluation itself is a pure function of the
//! bindings. Build a graph once with [`GraphBuilder`], then evaluate it any
//! number of times through an [`Exec`], which owns preallocated value and
//! adjoint buffers keyed by node id.
//!
//! Shapes are fixed at construction time; every builder method validates its
//! operand shapes and infers the output shape, so a successfully built graph
//! cannot fail shape checks at run time (bindings are still checked).

mod check;
mod exec;

pub use check::{grad_check, grad_check_all, GradCheckSetup};
pub use exec::Exec;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

/// Index of a node within its graph.
pub type NodeId = usize;

/// Primitive operation inventory.
///
/// Binary elementwise ops require exactly equal shapes; mixing extents is done
/// through explicit `Broadcast`/`Reshape` nodes so every adjoint stays simple.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Non-trainable leaf, bound before each forward pass.
    Input { name: String },
    /// Trainable leaf.
    Param { name: String },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    /// Elementwise power with a constant exponent.
    PowScalar(NodeId, f64),
    /// Elementwise power with a scalar-node exponent (base must be positive).
    Pow { base: NodeId, exponent: NodeId },
    /// 2-D matrix product.
    Matmul(NodeId, NodeId),
    /// 2-D transpose.
    Transpose(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Elu(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    /// Piecewise quadratic/linear penalty with transition point `delta`.
    SmoothL1 { x: NodeId, delta: f64 },
    /// Elementwise max(x, floor).
    ClampMin(NodeId, f64),
    /// Sum over one axis, or over everything (`axis: None` gives a scalar).
    Sum { x: NodeId, axis: Option<usize> },
    Mean { x: NodeId, axis: Option<usize> },
    /// Max over one axis or all; the adjoint routes to the first maximal
    /// element (ties broken by lowest index).
    MaxReduce { x: NodeId, axis: Option<usize> },
    /// Numpy-style expansion to a target shape (right-aligned, 1 -> n).
    Broadcast { x: NodeId, shape: Vec<usize> },
    Reshape { x: NodeId, shape: Vec<usize> },
    Concat { axis: usize, parts: Vec<NodeId> },
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    /// Cosine similarity of two flattened tensors -> scalar.
    CosineSim(NodeId, NodeId),
    /// The k elements with largest |value| (descending by |value|, ties by
    /// lowest index), signs preserved. The adjoint scatters to the selected
    /// positions.
    TopKAbs { x: NodeId, k: usize },
    /// First-order linear recurrence along axis 0:
    /// `h[t] = decay[t] * h[t-1] + update[t]`, `h[-1] = 0`, elementwise over
    /// the remaining axes. Output holds h for every step.
    ScanLinear { decay: NodeId, update: NodeId },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::PowScalar(..) => "pow_scalar",
            Op::Pow { .. } => "pow",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Exp(..) => "exp",
            Op::Softplus(..) => "softplus",
            Op::Elu(..) => "elu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Abs(..) => "abs",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MaxReduce { .. } => "max_reduce",
            Op::Broadcast { .. } => "broadcast",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::CosineSim(..) => "cosine_sim",
            Op::TopKAbs { .. } => "topk_abs",
            Op::ScanLinear { .. } => "scan_linear",
        }
    }

}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
}

/// Topologically ordered primitive-operation graph with named leaves and
/// named outputs.
#[derive(Debug, Clone, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl CompGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn outputs(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.outputs.iter().map(|(n, &id)| (n.as_str(), id))
    }

    /// Names of trainable leaves, in sorted order.
    pub fn param_names(&self) -> Vec<String> {
        self.leaves
            .iter()
            .filter(|(_, &id)| matches!(self.nodes[id].op, Op::Param { .. }))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Names of non-trainable leaves, in sorted order.
    pub fn input_names(&self) -> Vec<String> {
        self.leaves
            .iter()
            .filter(|(_, &id)| matches!(self.nodes[id].op, Op::Input { .. }))
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn leaf_shape(&self, name: &str) -> Option<&[usize]> {
        self.leaf(name).map(|id| self.nodes[id].shape.as_slice())
    }
}

/// Convenience wrapper: binds leaves, runs a forward pass, and returns every
/// marked output by name.
pub fn forward<E: Element>(
    graph: &CompGraph,
    bindings: &BTreeMap<String, Tensor<E>>,
) -> Result<BTreeMap<String, Tensor<E>>> {
    let mut exec = Exec::new(graph);
    for (name, t) in bindings {
        exec.bind(graph, name, t)?;
    }
    exec.forward(graph)?;
    let mut out = BTreeMap::new();
    for (name, id) in graph.outputs() {
        out.insert(name.to_string(), exec.value(graph, id));
    }
    Ok(out)
}

/// Convenience wrapper: forward + backward from `loss`, returning the
/// gradient for every trainable leaf and every requested input leaf.
pub fn backward<E: Element>(
    graph: &CompGraph,
    bindings: &BTreeMap<String, Tensor<E>>,
    loss: NodeId,
    wrt_inputs: &[&str],
) -> Result<BTreeMap<String, Tensor<E>>> {
    let mut exec = Exec::new(graph);
    for (name, t) in bindings {
        exec.bind(graph, name, t)?;
    }
    exec.forward(graph)?;
    exec.backward(graph, loss)?;
    let mut grads = BTreeMap::new();
    for name in graph.param_names() {
        let id = graph.leaf(&name).expect("param leaf");
        grads.insert(name, exec.grad(graph, id));
    }
    for name in wrt_inputs {
        let id = graph
            .leaf(name)
            .ok_or_else(|| Error::Graph(format!("unknown leaf '{name}'")))?;
        grads.insert(name.to_string(), exec.grad(graph, id));
    }
    Ok(grads)
}

/// Incremental graph constructor. Every method validates operand shapes and
/// returns the id of the new node.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: CompGraph,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(self) -> CompGraph {
        self.graph
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.graph.nodes[id].shape
    }

    /// Marks a node as a named output of the graph.
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.graph.outputs.insert(name.to_string(), id);
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = self.graph.nodes.len();
        self.graph.nodes.push(Node { op, shape });
        id
    }

    fn leaf(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<NodeId> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "leaf '{name}' has zero extent in {shape:?}"
            )));
        }
        if let Some(&id) = self.graph.leaves.get(name) {
            let node = &self.graph.nodes[id];
            let same_kind = matches!(
                (&node.op, trainable),
                (Op::Param { .. }, true) | (Op::Input { .. }, false)
            );
            if node.shape == shape && same_kind {
                return Ok(id);
            }
            return Err(Error::LeafRedefined(name.to_string()));
        }
        let op = if trainable {
            Op::Param { name: name.to_string() }
        } else {
            Op::Input { name: name.to_string() }
        };
        let id = self.push(op, shape.to_vec());
        self.graph.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declares (or re-fetches) a non-trainable leaf.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, false)
    }

    /// Declares (or re-fetches) a trainable leaf.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, true)
    }

    fn require_same(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.graph.nodes[a].shape, &self.graph.nodes[b].shape);
        if sa != sb {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {sa:?} vs {sb:?}"
            )));
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.require_same(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.require_same(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.require_same(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.graph.nodes[a].shape.clone();
        self.push(Op::AddScalar(a, c), shape)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.graph.nodes[a].shape.clone();
        self.push(Op::MulScalar(a, c), shape)
    }

    pub fn pow_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.graph.nodes[a].shape.clone();
        self.push(Op::PowScalar(a, c), shape)
    }

    /// `base ^ exponent` with a scalar exponent node.
    pub fn pow(&mut self, base: NodeId, exponent: NodeId) -> Result<NodeId> {
        if numel(&self.graph.nodes[exponent].shape) != 1 {
            return Err(Error::ShapeMismatch(format!(
                "pow exponent must be scalar, got {:?}",
                self.graph.nodes[exponent].shape
            )));
        }
        let shape = self.graph.nodes[base].shape.clone();
        Ok(self.push(Op::Pow { base, exponent }, shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.graph.nodes[a].shape, &self.graph.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul: {sa:?} x {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::Matmul(a, b), shape))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.graph.nodes[a].shape;
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch(format!("transpose: {sa:?}")));
        }
        let shape = vec![sa[1], sa[0]];
        Ok(self.push(Op::Transpose(a), shape))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(NodeId) -> Op) -> NodeId {
        let shape = self.graph.nodes[a].shape.clone();
        self.push(f(a), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Elu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Abs)
    }

    pub fn smooth_l1(&mut self, a: NodeId, delta: f64) -> NodeId {
        let shape = self.graph.nodes[a].shape.clone();
        self.push(Op::SmoothL1 { x: a, delta }, shape)
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let shape = self.graph.nodes[a].shape.clone();
        self.push(Op::ClampMin(a, floor), shape)
    }

    fn reduced_shape(&self, a: NodeId, axis: Option<usize>, what: &str) -> Result<Vec<usize>> {
        let sa = &self.graph.nodes[a].shape;
        match axis {
            None => Ok(vec![]),
            Some(ax) if ax < sa.len() => {
                let mut s = sa.clone();
                s.remove(ax);
                Ok(s)
            }
            Some(ax) => Err(Error::ShapeMismatch(format!(
                "{what}: axis {ax} out of range for {sa:?}"
            ))),
        }
    }

    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let shape = self.reduced_shape(a, axis, "sum")?;
        Ok(self.push(Op::Sum { x: a, axis }, shape))
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let shape = self.reduced_shape(a, axis, "mean")?;
        Ok(self.push(Op::Mean { x: a, axis }, shape))
    }

    pub fn max_reduce(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let shape = self.reduced_shape(a, axis, "max_reduce")?;
        Ok(self.push(Op::MaxReduce { x: a, axis }, shape))
    }

    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sa = &self.graph.nodes[a].shape;
        if sa.len() > shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "broadcast: {sa:?} to {shape:?}"
            )));
        }
        let pad = shape.len() - sa.len();
        for (i, &target) in shape.iter().enumerate() {
            let src = if i < pad { 1 } else { sa[i - pad] };
            if src != target && src != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "broadcast: {sa:?} to {shape:?}"
                )));
            }
        }
        Ok(self.push(
            Op::Broadcast { x: a, shape: shape.to_vec() },
            shape.to_vec(),
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sa = &self.graph.nodes[a].shape;
        if numel(sa) != numel(shape) || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "reshape: {sa:?} to {shape:?}"
            )));
        }
        Ok(self.push(Op::Reshape { x: a, shape: shape.to_vec() }, shape.to_vec()))
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Graph("concat of zero parts".into()));
        }
        let first = self.graph.nodes[parts[0]].shape.clone();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch(format!(
                "concat: axis {axis} out of range for {first:?}"
            )));
        }
        let mut total = 0usize;
        for &p in parts {
            let sp = &self.graph.nodes[p].shape;
            if sp.len() != first.len() {
                return Err(Error::ShapeMismatch(format!(
                    "concat: rank mismatch {first:?} vs {sp:?}"
                )));
            }
            for (i, (&a, &b)) in first.iter().zip(sp.iter()).enumerate() {
                if i != axis && a != b {
                    return Err(Error::ShapeMismatch(format!(
                        "concat: {first:?} vs {sp:?} along axis {axis}"
                    )));
                }
            }
            total += sp[axis];
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Op::Concat { axis, parts: parts.to_vec() }, shape))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sa = &self.graph.nodes[a].shape;
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(Error::ShapeMismatch(format!(
                "slice: [{start}, {start}+{len}) along axis {axis} of {sa:?}"
            )));
        }
        let mut shape = sa.clone();
        shape[axis] = len;
        Ok(self.push(Op::Slice { x: a, axis, start, len }, shape))
    }

    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.graph.nodes[a].shape, &self.graph.nodes[b].shape);
        if numel(sa) != numel(sb) {
            return Err(Error::ShapeMismatch(format!(
                "cosine_sim: {sa:?} vs {sb:?}"
            )));
        }
        Ok(self.push(Op::CosineSim(a, b), vec![]))
    }

    pub fn topk_abs(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let n = numel(&self.graph.nodes[a].shape);
        if k == 0 || k > n {
            return Err(Error::ShapeMismatch(format!(
                "topk_abs: k={k} out of range for {n} elements"
            )));
        }
        Ok(self.push(Op::TopKAbs { x: a, k }, vec![k]))
    }

    pub fn scan_linear(&mut self, decay: NodeId, update: NodeId) -> Result<NodeId> {
        let shape = self.require_same(decay, update, "scan_linear")?;
        if shape.is_empty() {
            return Err(Error::ShapeMismatch(
                "scan_linear needs at least one axis".into(),
            ));
        }
        Ok(self.push(Op::ScanLinear { decay, update }, shape))
    }

    // -- compound helpers (no new primitives) --

    /// `x @ w + b`, with `b` broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            None => Ok(y),
            Some(b) => {
                let rows = self.shape(y)[0];
                let cols = self.shape(y)[1];
                let b2 = self.reshape(b, &[1, cols])?;
                let bb = self.broadcast(b2, &[rows, cols])?;
                self.add(y, bb)
            }
        }
    }

    /// `1 - cosine_sim(a, b)` as a scalar node.
    pub fn cosine_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let c = self.cosine_sim(a, b)?;
        let neg = self.mul_scalar(c, -1.0);
        Ok(self.add_scalar(neg, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bmap<E: Element>(pairs: Vec<(&str, Tensor<E>)>) -> BTreeMap<String, Tensor<E>> {
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn scalar_multiply_structure() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2]).unwrap();
        let y = b.mul_scalar(x, 2.0);
        b.mark_output("y", y);
        let g = b.finish();
        let out = forward(
            &g,
            &bmap(vec![("x", Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap())]),
        )
        .unwrap();
        assert_eq!(out["y"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut b = GraphBuilder::new();
        let a = b.input("a", &[1, 2]).unwrap();
        let c = b.input("b", &[2, 1]).unwrap();
        let y = b.matmul(a, c).unwrap();
        b.mark_output("y", y);
        let g = b.finish();
        let out = forward(
            &g,
            &bmap(vec![
                ("a", Tensor::<f64>::new(vec![1, 2], vec![1.0, 2.0]).unwrap()),
                ("b", Tensor::<f64>::new(vec![2, 1], vec![3.0, 4.0]).unwrap()),
            ]),
        )
        .unwrap();
        assert_eq!(out["y"].data(), &[11.0]);
    }

    #[test]
    fn missing_binding_is_an_error() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2]).unwrap();
        let y = b.mul_scalar(x, 2.0);
        b.mark_output("y", y);
        let g = b.finish();
        let err = forward::<f64>(&g, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::MissingBinding(name) if name == "x"));
    }

    #[test]
    fn builder_rejects_bad_shapes() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 3]).unwrap();
        let y = b.input("y", &[3, 2]).unwrap();
        assert!(b.add(x, y).is_err());
        assert!(b.matmul(x, x).is_err());
        assert!(b.slice(x, 0, 2, 1).is_err());
        assert!(b.broadcast(x, &[2, 4]).is_err());
    }

    #[test]
    fn leaf_redefinition_must_match() {
        let mut b = GraphBuilder::new();
        let x1 = b.param("w", &[2, 2]).unwrap();
        let x2 = b.param("w", &[2, 2]).unwrap();
        assert_eq!(x1, x2);
        assert!(b.param("w", &[2, 3]).is_err());
        assert!(b.input("w", &[2, 2]).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[2]).unwrap();
        let sq = b.pow_scalar(x, 2.0);
        let loss = b.sum(sq, None).unwrap();
        let g = b.finish();
        let grads = backward(
            &g,
            &bmap(vec![("x", Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap())]),
            loss,
            &[],
        )
        .unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn cosine_distance_gradient_vanishes_at_equal_vectors() {
        let mut b = GraphBuilder::new();
        let a = b.param("a", &[3]).unwrap();
        let c = b.input("b", &[3]).unwrap();
        let loss = b.cosine_distance(a, c).unwrap();
        let g = b.finish();
        let v = Tensor::<f64>::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let grads = backward(
            &g,
            &bmap(vec![("a", v.clone()), ("b", v)]),
            loss,
            &[],
        )
        .unwrap();
        for &gv in grads["a"].data() {
            assert_eq!(gv, 0.0, "gradient of cosine distance at a=b must be zero");
        }
    }

    #[test]
    fn elu_mean_gradient_closed_form() {
        // loss = mean(elu(x) + 1) at x = -0.5 has gradient exp(-0.5)/n.
        let n = 4usize;
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[n]).unwrap();
        let e = b.elu(x);
        let e1 = b.add_scalar(e, 1.0);
        let loss = b.mean(e1, None).unwrap();
        let g = b.finish();
        let grads = backward(
            &g,
            &bmap(vec![("x", Tensor::<f64>::filled(&[n], -0.5))]),
            loss,
            &[],
        )
        .unwrap();
        let expect = (-0.5f64).exp() / n as f64;
        for &gv in grads["x"].data() {
            assert!((gv - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[2]).unwrap();
        let y = b.mul_scalar(x, 3.0);
        let g = b.finish();
        let err = backward(
            &g,
            &bmap(vec![("x", Tensor::<f64>::filled(&[2], 1.0))]),
            y,
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, Error::LossNotScalar(_)));
    }

    #[test]
    fn constant_graph_has_zero_gradient() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[2]).unwrap();
        let zero = b.mul_scalar(x, 0.0);
        let loss = b.sum(zero, None).unwrap();
        let g = b.finish();
        let grads = backward(
            &g,
            &bmap(vec![("x", Tensor::<f64>::filled(&[2], 5.0))]),
            loss,
            &[],
        )
        .unwrap();
        assert_eq!(grads["x"].data(), &[0.0, 0.0]);
    }
}
