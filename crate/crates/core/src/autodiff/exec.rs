//! Graph evaluation: forward pass, reverse-mode backward pass, preallocated
//! buffers keyed by node id.

use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Element, Tensor};

use super::{CompGraph, Node, NodeId, Op};

/// Reusable evaluation state for one graph. Buffers are allocated once from
/// the graph's static shapes; repeated forward/backward passes reuse them.
///
/// One `Exec` serves one thread; independent `Exec` instances over the same
/// (read-only) graph may run concurrently.
pub struct Exec<E: Element> {
    values: Vec<Vec<E>>,
    adjoints: Vec<Vec<E>>,
    /// Adjoint buffers written by a previous backward pass (must be re-zeroed
    /// even if the next loss does not reach them).
    adjoint_dirty: Vec<bool>,
    bound: Vec<bool>,
    forward_done: bool,
}

impl<E: Element> Exec<E> {
    pub fn new(graph: &CompGraph) -> Self {
        let values = graph
            .nodes()
            .iter()
            .map(|n| vec![E::ZERO; numel(&n.shape)])
            .collect();
        let adjoints = graph
            .nodes()
            .iter()
            .map(|n| vec![E::ZERO; numel(&n.shape)])
            .collect();
        Exec {
            values,
            adjoints,
            adjoint_dirty: vec![false; graph.len()],
            bound: vec![false; graph.len()],
            forward_done: false,
        }
    }

    /// Binds a leaf (input or parameter) by name. The tensor shape must equal
    /// the declared leaf shape.
    pub fn bind(&mut self, graph: &CompGraph, name: &str, value: &Tensor<E>) -> Result<()> {
        let id = graph
            .leaf(name)
            .ok_or_else(|| Error::Graph(format!("unknown leaf '{name}'")))?;
        let node = graph.node(id);
        if node.shape != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "binding '{name}': leaf is {:?}, tensor is {:?}",
                node.shape,
                value.shape()
            )));
        }
        self.values[id].copy_from_slice(value.data());
        self.bound[id] = true;
        self.forward_done = false;
        Ok(())
    }

    /// Runs the forward pass over all nodes in topological order. Every node
    /// output is checked finite; the first offender is reported by id.
    pub fn forward(&mut self, graph: &CompGraph) -> Result<()> {
        for (id, node) in graph.nodes().iter().enumerate() {
            match &node.op {
                Op::Input { name } | Op::Param { name } => {
                    if !self.bound[id] {
                        return Err(Error::MissingBinding(name.clone()));
                    }
                    continue;
                }
                _ => {}
            }
            self.eval_node(graph, id)?;
            if !all_finite(&self.values[id]) {
                return Err(Error::NonFinite {
                    node: id,
                    op: node.op.kind().to_string(),
                });
            }
        }
        self.forward_done = true;
        Ok(())
    }

    /// Reverse pass from a scalar loss node. Adjoints accumulate for every
    /// node on a path to the loss; leaf gradients are read out with
    /// [`Exec::grad`] (zero for leaves the loss does not depend on).
    pub fn backward(&mut self, graph: &CompGraph, loss: NodeId) -> Result<()> {
        if !self.forward_done {
            return Err(Error::Graph("backward before forward".into()));
        }
        let loss_shape = &graph.node(loss).shape;
        if numel(loss_shape) != 1 {
            return Err(Error::LossNotScalar(loss_shape.clone()));
        }
        // Only nodes the loss actually depends on participate; everything
        // else keeps (and may need to surrender) a zero adjoint.
        let live = live_set(graph, loss);
        for (id, a) in self.adjoints.iter_mut().enumerate() {
            if live[id] || self.adjoint_dirty[id] {
                for v in a.iter_mut() {
                    *v = E::ZERO;
                }
                self.adjoint_dirty[id] = false;
            }
        }
        self.adjoints[loss][0] = E::ONE;
        for id in (0..=loss).rev() {
            if !live[id] {
                continue;
            }
            self.backprop_node(graph, id)?;
        }
        for (id, a) in self.adjoints.iter().enumerate() {
            if !live[id] {
                continue;
            }
            self.adjoint_dirty[id] = true;
            if !all_finite(a) {
                return Err(Error::NonFinite {
                    node: id,
                    op: format!("adjoint of {}", graph.node(id).op.kind()),
                });
            }
        }
        Ok(())
    }

    pub fn value(&self, graph: &CompGraph, id: NodeId) -> Tensor<E> {
        Tensor::new(graph.node(id).shape.clone(), self.values[id].clone())
            .expect("exec buffers match graph shapes")
    }

    pub fn value_slice(&self, id: NodeId) -> &[E] {
        &self.values[id]
    }

    /// Scalar convenience accessor.
    pub fn scalar(&self, id: NodeId) -> E {
        self.values[id][0]
    }

    pub fn grad(&self, graph: &CompGraph, id: NodeId) -> Tensor<E> {
        Tensor::new(graph.node(id).shape.clone(), self.adjoints[id].clone())
            .expect("exec buffers match graph shapes")
    }

    pub fn grad_slice(&self, id: NodeId) -> &[E] {
        &self.adjoints[id]
    }

    // ---- forward kernels ----

    fn eval_node(&mut self, graph: &CompGraph, id: NodeId) -> Result<()> {
        let node = graph.node(id);
        // Split borrows: output buffer is distinct from all operand buffers
        // because operands strictly precede the node.
        let (before, rest) = self.values.split_at_mut(id);
        let out = &mut rest[0];
        let val = |n: NodeId| -> &[E] { &before[n] };

        match &node.op {
            Op::Input { .. } | Op::Param { .. } => unreachable!("leaves are bound"),
            Op::Add(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                for i in 0..out.len() {
                    out[i] = xa[i] + xb[i];
                }
            }
            Op::Sub(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                for i in 0..out.len() {
                    out[i] = xa[i] - xb[i];
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                for i in 0..out.len() {
                    out[i] = xa[i] * xb[i];
                }
            }
            Op::AddScalar(a, c) => {
                let c = E::from_f64(*c);
                for (o, &x) in out.iter_mut().zip(val(*a)) {
                    *o = x + c;
                }
            }
            Op::MulScalar(a, c) => {
                let c = E::from_f64(*c);
                for (o, &x) in out.iter_mut().zip(val(*a)) {
                    *o = x * c;
                }
            }
            Op::PowScalar(a, c) => {
                let c = E::from_f64(*c);
                for (o, &x) in out.iter_mut().zip(val(*a)) {
                    *o = x.powf(c);
                }
            }
            Op::Pow { base, exponent } => {
                let e = val(*exponent)[0];
                let xb = val(*base);
                if xb.iter().any(|v| *v <= E::ZERO) {
                    return Err(Error::Graph(format!(
                        "pow at node {id}: base must be positive"
                    )));
                }
                for i in 0..out.len() {
                    out[i] = xb[i].powf(e);
                }
            }
            Op::Matmul(a, b) => {
                let sa = &graph.node(*a).shape;
                let sb = &graph.node(*b).shape;
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                matmul(val(*a), val(*b), out, m, k, n);
            }
            Op::Transpose(a) => {
                let sa = &graph.node(*a).shape;
                let (r, c) = (sa[0], sa[1]);
                let x = val(*a);
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = x[i * c + j];
                    }
                }
            }
            Op::Exp(a) => {
                for (o, &x) in out.iter_mut().zip(val(*a)) {
                    *o = x.exp();
                }
            }
            Op::Softplus(a) => {
                for (o, &x) in out.iter_mut().zip(val(*a)) {
                    *o = softplus(x);
                }
            }
            Op::Elu(a) => {
                for (o, &x) in out.iter_mut().zip(val(*a)) {
                    *o = if x > E::ZERO { x } else { x.exp() - E::ONE };
                }
            }
            Op::Sigmoid(a) => {
                for (o, &x) in out.iter_mut().zip(val(*a)) {
                    *o = sigmoid(x);
                }
            }
            Op::Abs(a) => {
                for (o, &x) in out.iter_mut().zip(val(*a)) {
                    *o = x.abs();
                }
            }
            Op::SmoothL1 { x, delta } => {
                let d = E::from_f64(*delta);
                let half = E::from_f64(0.5);
                for (o, &v) in out.iter_mut().zip(val(*x)) {
                    *o = if v.abs() < d {
                        half * v * v / d
                    } else {
                        v.abs() - half * d
                    };
                }
            }
            Op::ClampMin(a, floor) => {
                let f = E::from_f64(*floor);
                for (o, &x) in out.iter_mut().zip(val(*a)) {
                    *o = x.maximum(f);
                }
            }
            Op::Sum { x, axis } => {
                reduce(val(*x), out, &graph.node(*x).shape, *axis, Reduction::Sum);
            }
            Op::Mean { x, axis } => {
                reduce(val(*x), out, &graph.node(*x).shape, *axis, Reduction::Mean);
            }
            Op::MaxReduce { x, axis } => {
                reduce(val(*x), out, &graph.node(*x).shape, *axis, Reduction::Max);
            }
            Op::Broadcast { x, shape } => {
                broadcast_forward(val(*x), out, &graph.node(*x).shape, shape);
            }
            Op::Reshape { x, .. } => {
                out.copy_from_slice(val(*x));
            }
            Op::Concat { axis, parts } => {
                let out_shape = &node.shape;
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let plen = graph.node(p).shape[*axis];
                    let x = val(p);
                    for o in 0..outer {
                        let src = &x[o * plen * inner..(o + 1) * plen * inner];
                        let dst_start = (o * total_axis + offset) * inner;
                        out[dst_start..dst_start + plen * inner].copy_from_slice(src);
                    }
                    offset += plen;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let in_shape = &graph.node(*x).shape;
                let inner: usize = in_shape[axis + 1..].iter().product();
                let outer: usize = in_shape[..*axis].iter().product();
                let mid = in_shape[*axis];
                let xv = val(*x);
                for o in 0..outer {
                    let src_start = (o * mid + start) * inner;
                    let dst_start = o * len * inner;
                    out[dst_start..dst_start + len * inner]
                        .copy_from_slice(&xv[src_start..src_start + len * inner]);
                }
            }
            Op::CosineSim(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let mut dot = E::ZERO;
                let mut na = E::ZERO;
                let mut nb = E::ZERO;
                for i in 0..xa.len() {
                    dot += xa[i] * xb[i];
                    na += xa[i] * xa[i];
                    nb += xb[i] * xb[i];
                }
                if na == E::ZERO || nb == E::ZERO {
                    return Err(Error::ZeroNorm);
                }
                // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): for a == b
                // the quotient is then exactly 1.
                out[0] = dot / (na * nb).sqrt();
            }
            Op::TopKAbs { x, k } => {
                let idx = topk_abs_indices(val(*x), *k);
                let xv = val(*x);
                for (o, &i) in out.iter_mut().zip(idx.iter()) {
                    *o = xv[i];
                }
            }
            Op::ScanLinear { decay, update } => {
                let shape = &node.shape;
                let steps = shape[0];
                let width: usize = shape[1..].iter().product();
                let d = val(*decay);
                let u = val(*update);
                for j in 0..width {
                    out[j] = u[j];
                }
                for t in 1..steps {
                    let (prev, cur) = out.split_at_mut(t * width);
                    let prev = &prev[(t - 1) * width..];
                    let dk = &d[t * width..(t + 1) * width];
                    let uk = &u[t * width..(t + 1) * width];
                    for j in 0..width {
                        cur[j] = dk[j] * prev[j] + uk[j];
                    }
                }
            }
        }
        Ok(())
    }

    // ---- backward kernels ----

    fn backprop_node(&mut self, graph: &CompGraph, id: NodeId) -> Result<()> {
        let node: &Node = graph.node(id);
        if matches!(node.op, Op::Input { .. } | Op::Param { .. }) {
            return Ok(());
        }
        // The adjoint of `id` is fixed now; scatter it into operand adjoints.
        let g = std::mem::take(&mut self.adjoints[id]);
        {
            let values = &self.values;
            let adjoints = &mut self.adjoints;

            match &node.op {
                Op::Input { .. } | Op::Param { .. } => unreachable!(),
                Op::Add(a, b) => {
                    accumulate(&mut adjoints[*a], &g);
                    accumulate(&mut adjoints[*b], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adjoints[*a], &g);
                    for (ga, &gv) in adjoints[*b].iter_mut().zip(&g) {
                        *ga -= gv;
                    }
                }
                Op::Mul(a, b) => {
                    for i in 0..g.len() {
                        let (va, vb) = (values[*a][i], values[*b][i]);
                        adjoints[*a][i] += g[i] * vb;
                        adjoints[*b][i] += g[i] * va;
                    }
                }
                Op::AddScalar(a, _) => accumulate(&mut adjoints[*a], &g),
                Op::MulScalar(a, c) => {
                    let c = E::from_f64(*c);
                    for (ga, &gv) in adjoints[*a].iter_mut().zip(&g) {
                        *ga += gv * c;
                    }
                }
                Op::PowScalar(a, c) => {
                    let ce = E::from_f64(*c);
                    let cm1 = E::from_f64(*c - 1.0);
                    for i in 0..g.len() {
                        adjoints[*a][i] += g[i] * ce * values[*a][i].powf(cm1);
                    }
                }
                Op::Pow { base, exponent } => {
                    let e = values[*exponent][0];
                    let mut ge = E::ZERO;
                    for i in 0..g.len() {
                        let b = values[*base][i];
                        let y = values[id][i];
                        adjoints[*base][i] += g[i] * e * b.powf(e - E::ONE);
                        ge += g[i] * y * b.ln();
                    }
                    adjoints[*exponent][0] += ge;
                }
                Op::Matmul(a, b) => {
                    let sa = &graph.node(*a).shape;
                    let sb = &graph.node(*b).shape;
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    // dA += dC . B^T ; dB += A^T . dC
                    {
                        let bv = &values[*b];
                        let da = &mut adjoints[*a];
                        for i in 0..m {
                            for kk in 0..k {
                                let mut acc = E::ZERO;
                                let grow = &g[i * n..(i + 1) * n];
                                let brow = &bv[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    acc += grow[j] * brow[j];
                                }
                                da[i * k + kk] += acc;
                            }
                        }
                    }
                    {
                        let av = &values[*a];
                        let db = &mut adjoints[*b];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for kk in 0..k {
                                let aik = av[i * k + kk];
                                if aik == E::ZERO {
                                    continue;
                                }
                                let drow = &mut db[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    drow[j] += aik * grow[j];
                                }
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let sa = &graph.node(*a).shape;
                    let (r, c) = (sa[0], sa[1]);
                    let da = &mut adjoints[*a];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::Exp(a) => {
                    for i in 0..g.len() {
                        adjoints[*a][i] += g[i] * values[id][i];
                    }
                }
                Op::Softplus(a) => {
                    for i in 0..g.len() {
                        adjoints[*a][i] += g[i] * sigmoid(values[*a][i]);
                    }
                }
                Op::Elu(a) => {
                    for i in 0..g.len() {
                        let x = values[*a][i];
                        let d = if x > E::ZERO { E::ONE } else { x.exp() };
                        adjoints[*a][i] += g[i] * d;
                    }
                }
                Op::Sigmoid(a) => {
                    for i in 0..g.len() {
                        let s = values[id][i];
                        adjoints[*a][i] += g[i] * s * (E::ONE - s);
                    }
                }
                Op::Abs(a) => {
                    for i in 0..g.len() {
                        let x = values[*a][i];
                        let s = if x > E::ZERO {
                            E::ONE
                        } else if x < E::ZERO {
                            -E::ONE
                        } else {
                            E::ZERO
                        };
                        adjoints[*a][i] += g[i] * s;
                    }
                }
                Op::SmoothL1 { x, delta } => {
                    let d = E::from_f64(*delta);
                    for i in 0..g.len() {
                        let v = values[*x][i];
                        let grad = if v.abs() < d {
                            v / d
                        } else if v > E::ZERO {
                            E::ONE
                        } else {
                            -E::ONE
                        };
                        adjoints[*x][i] += g[i] * grad;
                    }
                }
                Op::ClampMin(a, floor) => {
                    let f = E::from_f64(*floor);
                    for i in 0..g.len() {
                        if values[*a][i] > f {
                            adjoints[*a][i] += g[i];
                        }
                    }
                }
                Op::Sum { x, axis } => {
                    let in_shape = &graph.node(*x).shape;
                    scatter_reduce_grad(&g, &mut adjoints[*x], in_shape, *axis, E::ONE);
                }
                Op::Mean { x, axis } => {
                    let in_shape = &graph.node(*x).shape;
                    let count = match axis {
                        None => numel(in_shape),
                        Some(ax) => in_shape[*ax],
                    };
                    let inv = E::from_f64(1.0 / count as f64);
                    scatter_reduce_grad(&g, &mut adjoints[*x], in_shape, *axis, inv);
                }
                Op::MaxReduce { x, axis } => {
                    scatter_max_grad(&g, &mut adjoints[*x], &values[*x], &graph.node(*x).shape, *axis);
                }
                Op::Broadcast { x, shape } => {
                    broadcast_backward(&g, &mut adjoints[*x], &graph.node(*x).shape, shape);
                }
                Op::Reshape { x, .. } => accumulate(&mut adjoints[*x], &g),
                Op::Concat { axis, parts } => {
                    let out_shape = &node.shape;
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let total_axis = out_shape[*axis];
                    let mut offset = 0usize;
                    for &p in parts {
                        let plen = graph.node(p).shape[*axis];
                        let dp = &mut adjoints[p];
                        for o in 0..outer {
                            let src_start = (o * total_axis + offset) * inner;
                            let dst_start = o * plen * inner;
                            for i in 0..plen * inner {
                                dp[dst_start + i] += g[src_start + i];
                            }
                        }
                        offset += plen;
                    }
                }
                Op::Slice { x, axis, start, len } => {
                    let in_shape = &graph.node(*x).shape;
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let mid = in_shape[*axis];
                    let dx = &mut adjoints[*x];
                    for o in 0..outer {
                        let dst_start = (o * mid + start) * inner;
                        let src_start = o * len * inner;
                        for i in 0..len * inner {
                            dx[dst_start + i] += g[src_start + i];
                        }
                    }
                }
                Op::CosineSim(a, b) => {
                    let (xa, xb) = (&values[*a], &values[*b]);
                    let mut dot = E::ZERO;
                    let mut na2 = E::ZERO;
                    let mut nb2 = E::ZERO;
                    for i in 0..xa.len() {
                        dot += xa[i] * xb[i];
                        na2 += xa[i] * xa[i];
                        nb2 += xb[i] * xb[i];
                    }
                    let denom = (na2 * nb2).sqrt();
                    let c = dot / denom;
                    let gs = g[0];
                    for i in 0..xa.len() {
                        adjoints[*a][i] += gs * (xb[i] / denom - c * xa[i] / na2);
                        adjoints[*b][i] += gs * (xa[i] / denom - c * xb[i] / nb2);
                    }
                }
                Op::TopKAbs { x, k } => {
                    let idx = topk_abs_indices(&values[*x], *k);
                    for (slot, &i) in idx.iter().enumerate() {
                        adjoints[*x][i] += g[slot];
                    }
                }
                Op::ScanLinear { decay, update } => {
                    let shape = &node.shape;
                    let steps = shape[0];
                    let width: usize = shape[1..].iter().product();
                    let h = &values[id];
                    let d = &values[*decay];
                    // Running adjoint a_t = dL/dh_t accumulated from later steps.
                    let mut a = vec![E::ZERO; width];
                    for t in (0..steps).rev() {
                        let gs = &g[t * width..(t + 1) * width];
                        for j in 0..width {
                            a[j] += gs[j];
                        }
                        {
                            let du = &mut adjoints[*update][t * width..(t + 1) * width];
                            for j in 0..width {
                                du[j] += a[j];
                            }
                        }
                        {
                            let dd = &mut adjoints[*decay][t * width..(t + 1) * width];
                            if t > 0 {
                                let hprev = &h[(t - 1) * width..t * width];
                                for j in 0..width {
                                    dd[j] += a[j] * hprev[j];
                                }
                            }
                            // h[-1] = 0, so decay[0] receives no gradient.
                        }
                        if t > 0 {
                            let dk = &d[t * width..(t + 1) * width];
                            for j in 0..width {
                                a[j] *= dk[j];
                            }
                        }
                    }
                }
            }
        }
        self.adjoints[id] = g;
        Ok(())
    }
}

fn accumulate<E: Element>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Vectorizable finiteness check: the absolute sum of a buffer is finite iff
/// every element is (NaN and infinity both propagate through addition, and
/// the magnitudes in this crate stay far from overflow at realistic sizes).
fn all_finite<E: Element>(xs: &[E]) -> bool {
    let mut acc = E::ZERO;
    for &x in xs {
        acc += x.abs();
    }
    acc.is_finite()
}

/// Operand node ids of one op.
fn operands(op: &Op, buf: &mut Vec<NodeId>) {
    buf.clear();
    match op {
        Op::Input { .. } | Op::Param { .. } => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::CosineSim(a, b) | Op::Matmul(a, b) => {
            buf.push(*a);
            buf.push(*b);
        }
        Op::Pow { base, exponent } => {
            buf.push(*base);
            buf.push(*exponent);
        }
        Op::ScanLinear { decay, update } => {
            buf.push(*decay);
            buf.push(*update);
        }
        Op::AddScalar(a, _)
        | Op::MulScalar(a, _)
        | Op::PowScalar(a, _)
        | Op::Transpose(a)
        | Op::Exp(a)
        | Op::Softplus(a)
        | Op::Elu(a)
        | Op::Sigmoid(a)
        | Op::Abs(a)
        | Op::SmoothL1 { x: a, .. }
        | Op::ClampMin(a, _)
        | Op::Sum { x: a, .. }
        | Op::Mean { x: a, .. }
        | Op::MaxReduce { x: a, .. }
        | Op::Broadcast { x: a, .. }
        | Op::Reshape { x: a, .. }
        | Op::Slice { x: a, .. }
        | Op::TopKAbs { x: a, .. } => buf.push(*a),
        Op::Concat { parts, .. } => buf.extend_from_slice(parts),
    }
}

/// Nodes the loss depends on, by reverse reachability.
fn live_set(graph: &CompGraph, loss: NodeId) -> Vec<bool> {
    let mut live = vec![false; graph.len()];
    live[loss] = true;
    let mut ops = Vec::with_capacity(4);
    for id in (0..=loss).rev() {
        if !live[id] {
            continue;
        }
        operands(&graph.node(id).op, &mut ops);
        for &o in &ops {
            live[o] = true;
        }
    }
    live
}

fn softplus<E: Element>(x: E) -> E {
    // max(x, 0) + ln(1 + exp(-|x|)) is stable for large |x|.
    x.maximum(E::ZERO) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

fn matmul<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for v in out.iter_mut() {
        *v = E::ZERO;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

enum Reduction {
    Sum,
    Mean,
    Max,
}

fn reduce<E: Element>(
    x: &[E],
    out: &mut [E],
    in_shape: &[usize],
    axis: Option<usize>,
    kind: Reduction,
) {
    let (outer, mid, inner) = reduce_dims(in_shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = x[o * mid * inner + i];
            for m in 1..mid {
                let v = x[(o * mid + m) * inner + i];
                acc = match kind {
                    Reduction::Sum | Reduction::Mean => acc + v,
                    Reduction::Max => {
                        if v > acc {
                            v
                        } else {
                            acc
                        }
                    }
                };
            }
            if let Reduction::Mean = kind {
                acc = acc / E::from_f64(mid as f64);
            }
            out[o * inner + i] = acc;
        }
    }
}

fn reduce_dims(in_shape: &[usize], axis: Option<usize>) -> (usize, usize, usize) {
    match axis {
        None => (1, numel(in_shape), 1),
        Some(ax) => {
            let outer: usize = in_shape[..ax].iter().product();
            let inner: usize = in_shape[ax + 1..].iter().product();
            (outer, in_shape[ax], inner)
        }
    }
}

/// Scatters a sum/mean gradient uniformly over the reduced axis.
fn scatter_reduce_grad<E: Element>(
    g: &[E],
    dx: &mut [E],
    in_shape: &[usize],
    axis: Option<usize>,
    scale: E,
) {
    let (outer, mid, inner) = reduce_dims(in_shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let gv = g[o * inner + i];
            if gv == E::ZERO {
                continue;
            }
            for m in 0..mid {
                dx[(o * mid + m) * inner + i] += gv * scale;
            }
        }
    }
}

/// Routes a max-reduction gradient to the first maximal element of each
/// reduced group (ties broken by lowest index).
fn scatter_max_grad<E: Element>(
    g: &[E],
    dx: &mut [E],
    xv: &[E],
    in_shape: &[usize],
    axis: Option<usize>,
) {
    let (outer, mid, inner) = reduce_dims(in_shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let gv = g[o * inner + i];
            if gv == E::ZERO {
                continue;
            }
            let mut best = 0usize;
            let mut best_v = xv[o * mid * inner + i];
            for m in 1..mid {
                let v = xv[(o * mid + m) * inner + i];
                if v > best_v {
                    best_v = v;
                    best = m;
                }
            }
            dx[(o * mid + best) * inner + i] += gv;
        }
    }
}

/// Source strides in output coordinates (0 where the axis is expanded).
fn broadcast_src_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let pad = out_shape.len() - in_shape.len();
    let in_strides = strides(in_shape);
    let mut src_strides = vec![0usize; out_shape.len()];
    for (i, &d) in out_shape.iter().enumerate() {
        if i >= pad && in_shape[i - pad] == d {
            src_strides[i] = in_strides[i - pad];
        }
    }
    src_strides
}

/// Walks the output index space with an odometer, applying `f(out_i, src_i)`.
/// No per-element division; the innermost axis is advanced by plain stride
/// addition.
fn broadcast_walk(out_shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let ndim = out_shape.len();
    if ndim == 0 {
        f(0, 0);
        return;
    }
    let total: usize = out_shape.iter().product();
    let inner = out_shape[ndim - 1];
    let inner_stride = src_strides[ndim - 1];
    let mut counters = vec![0usize; ndim];
    let mut src_base = 0usize;
    let mut oi = 0usize;
    while oi < total {
        let mut si = src_base;
        for _ in 0..inner {
            f(oi, si);
            oi += 1;
            si += inner_stride;
        }
        // Carry into the outer axes.
        let mut ax = ndim - 1;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            counters[ax] += 1;
            src_base += src_strides[ax];
            if counters[ax] < out_shape[ax] {
                break;
            }
            src_base -= src_strides[ax] * out_shape[ax];
            counters[ax] = 0;
        }
    }
}

fn broadcast_forward<E: Element>(x: &[E], out: &mut [E], in_shape: &[usize], out_shape: &[usize]) {
    let src_strides = broadcast_src_strides(in_shape, out_shape);
    broadcast_walk(out_shape, &src_strides, |oi, si| {
        out[oi] = x[si];
    });
}

fn broadcast_backward<E: Element>(g: &[E], dx: &mut [E], in_shape: &[usize], out_shape: &[usize]) {
    let src_strides = broadcast_src_strides(in_shape, out_shape);
    broadcast_walk(out_shape, &src_strides, |oi, si| {
        dx[si] += g[oi];
    });
}

/// Indices of the k largest-|value| elements, descending by |value|, ties
/// broken by lowest index. Deterministic for finite inputs.
fn topk_abs_indices<E: Element>(x: &[E], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_unstable_by(|&a, &b| {
        x[b].abs()
            .partial_cmp(&x[a].abs())
            .expect("finite values")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GraphBuilder;

    #[test]
    fn forward_is_pure_and_bit_identical() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4]).unwrap();
        let e = b.exp(x);
        let s = b.sigmoid(e);
        let y = b.sum(s, None).unwrap();
        b.mark_output("y", y);
        let g = b.finish();

        let xv = Tensor::<f64>::new(vec![4], vec![0.1, -2.3, 1.7, 0.0]).unwrap();
        let run = || -> u64 {
            let mut ex = Exec::new(&g);
            ex.bind(&g, "x", &xv).unwrap();
            ex.forward(&g).unwrap();
            ex.scalar(y).to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn scan_linear_matches_manual_recurrence() {
        let mut b = GraphBuilder::new();
        let d = b.input("d", &[3, 2]).unwrap();
        let u = b.input("u", &[3, 2]).unwrap();
        let h = b.scan_linear(d, u).unwrap();
        b.mark_output("h", h);
        let g = b.finish();

        let dv = Tensor::<f64>::new(vec![3, 2], vec![0.5, 0.9, 0.5, 0.9, 0.5, 0.9]).unwrap();
        let uv = Tensor::<f64>::new(vec![3, 2], vec![1.0, 1.0, 2.0, 0.0, 0.0, 3.0]).unwrap();
        let mut ex = Exec::new(&g);
        ex.bind(&g, "d", &dv).unwrap();
        ex.bind(&g, "u", &uv).unwrap();
        ex.forward(&g).unwrap();
        let hv = ex.value(&g, h);
        // h0 = u0; h1 = d1*h0 + u1; h2 = d2*h1 + u2
        assert_eq!(hv.data()[0], 1.0);
        assert_eq!(hv.data()[1], 1.0);
        assert_eq!(hv.data()[2], 0.5 * 1.0 + 2.0);
        assert_eq!(hv.data()[3], 0.9);
        assert_eq!(hv.data()[4], 0.5 * 2.5);
        assert_eq!(hv.data()[5], 0.9 * 0.9 + 3.0);
    }

    #[test]
    fn topk_abs_selection_order_and_signs() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[5]).unwrap();
        let t = b.topk_abs(x, 2).unwrap();
        b.mark_output("t", t);
        let g = b.finish();
        let xv = Tensor::<f64>::new(vec![5], vec![1.0, -3.0, 2.0, 0.0, -2.0]).unwrap();
        let mut ex = Exec::new(&g);
        ex.bind(&g, "x", &xv).unwrap();
        ex.forward(&g).unwrap();
        // |-3| > |2| == |-2| (tie broken by index: 2 before 4)
        assert_eq!(ex.value(&g, t).data(), &[-3.0, 2.0]);
    }

    #[test]
    fn max_reduce_gradient_routes_to_first_maximum() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[4]).unwrap();
        let m = b.max_reduce(x, None).unwrap();
        let g = b.finish();
        let xv = Tensor::<f64>::new(vec![4], vec![1.0, 5.0, 5.0, 2.0]).unwrap();
        let mut ex = Exec::new(&g);
        ex.bind(&g, "x", &xv).unwrap();
        ex.forward(&g).unwrap();
        ex.backward(&g, m).unwrap();
        assert_eq!(ex.grad_slice(x), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_forward_reports_offending_node() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[1]).unwrap();
        let e = b.exp(x);
        b.mark_output("e", e);
        let g = b.finish();
        let mut ex = Exec::new(&g);
        ex.bind(&g, "x", &Tensor::<f64>::new(vec![1], vec![1e9]).unwrap())
            .unwrap();
        let err = ex.forward(&g).unwrap_err();
        match err {
            Error::NonFinite { node, op } => {
                assert_eq!(node, e);
                assert_eq!(op, "exp");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn broadcast_and_backward_sum_over_expanded_axes() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[1, 3]).unwrap();
        let bc = b.broadcast(x, &[2, 3]).unwrap();
        let s = b.sum(bc, None).unwrap();
        let g = b.finish();
        let mut ex = Exec::new(&g);
        ex.bind(&g, "x", &Tensor::<f64>::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        ex.forward(&g).unwrap();
        assert_eq!(ex.scalar(s), 12.0);
        ex.backward(&g, s).unwrap();
        assert_eq!(ex.grad_slice(x), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn zero_norm_cosine_is_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2]).unwrap();
        let y = b.input("y", &[2]).unwrap();
        let c = b.cosine_sim(x, y).unwrap();
        b.mark_output("c", c);
        let g = b.finish();
        let mut ex = Exec::new(&g);
        ex.bind(&g, "x", &Tensor::<f64>::zeros(&[2])).unwrap();
        ex.bind(&g, "y", &Tensor::<f64>::filled(&[2], 1.0)).unwrap();
        assert!(matches!(ex.forward(&g), Err(Error::ZeroNorm)));
    }
}
