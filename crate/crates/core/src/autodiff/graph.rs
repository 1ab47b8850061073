use std::collections::HashMap;
use std::sync::Arc;

use super::{Bindings, Gradients, GraphError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, exposed for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Constant,
    MatMul,
    Add,
    Sub,
    Scale,
    Sigmoid,
    Tanh,
    Mul,
    Concat,
    MaxAxis,
    Softmax,
    LogSumExp,
    Dropout,
    Slice,
    Reshape,
    Gather,
    Sum,
}

impl OpKind {
    fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Constant => "constant",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Scale => "scale",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Mul => "mul",
            OpKind::Concat => "concat",
            OpKind::MaxAxis => "max_axis",
            OpKind::Softmax => "softmax",
            OpKind::LogSumExp => "log_sum_exp",
            OpKind::Dropout => "dropout",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Gather => "gather",
            OpKind::Sum => "sum",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Mul(NodeId, NodeId),
    Concat(Vec<NodeId>, usize),
    MaxAxis(NodeId, usize),
    Softmax(NodeId),
    LogSumExp(NodeId, usize),
    Dropout(NodeId, Arc<Tensor>),
    Slice {
        src: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(NodeId, Vec<usize>),
    Gather(NodeId, Vec<Option<usize>>),
    Sum(NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input(_) => OpKind::Input,
            Op::Constant => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Mul(..) => OpKind::Mul,
            Op::Concat(..) => OpKind::Concat,
            Op::MaxAxis(..) => OpKind::MaxAxis,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSumExp(..) => OpKind::LogSumExp,
            Op::Dropout(..) => OpKind::Dropout,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Gather(..) => OpKind::Gather,
            Op::Sum(_) => OpKind::Sum,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Option<Arc<Tensor>>,
    // Winning index per output coordinate of a max reduction.
    argmax: Vec<usize>,
}

/// Expression graph with cached forward values.
///
/// Nodes are appended in construction order, which is always a valid
/// topological order, so the graph is acyclic by construction.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: HashMap::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Turns the non-finite check on or off. On by default in debug builds.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Most recently created node.
    pub fn last(&self) -> Option<NodeId> {
        self.nodes.len().checked_sub(1).map(NodeId)
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Cached value of a node, available after [`Graph::evaluate`]
    /// (constants always have one).
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_deref()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value: None,
            argmax: Vec::new(),
        });
        id
    }

    /// Named leaf. Requesting the same name twice returns the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Constant);
        self.nodes[id.0].value = Some(Arc::new(value));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat(parts.to_vec(), axis))
    }

    /// Maximum along `axis`. Ties resolve to the lowest index, both for the
    /// value and for the gradient route.
    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::MaxAxis(a, axis))
    }

    /// Softmax of a vector.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn log_sum_exp(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::LogSumExp(a, axis))
    }

    /// Multiplies by a precomputed mask (already carrying the inverted
    /// dropout scale).
    pub fn dropout(&mut self, a: NodeId, mask: Tensor) -> NodeId {
        self.push(Op::Dropout(a, Arc::new(mask)))
    }

    pub fn slice(&mut self, src: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice {
            src,
            axis,
            start,
            len,
        })
    }

    /// Single entry of a vector as a `[1]` tensor.
    pub fn pick(&mut self, src: NodeId, index: usize) -> NodeId {
        self.slice(src, 0, index, 1)
    }

    pub fn reshape(&mut self, src: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(src, shape.to_vec()))
    }

    /// Rows of a matrix; `None` yields a zero row.
    pub fn gather(&mut self, src: NodeId, rows: Vec<Option<usize>>) -> NodeId {
        self.push(Op::Gather(src, rows))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    fn val(&self, id: NodeId) -> Result<&Tensor, GraphError> {
        self.nodes[id.0]
            .value
            .as_deref()
            .ok_or(GraphError::NotEvaluated(id.0))
    }

    /// Forward pass over every node up to and including `root`.
    pub fn evaluate(&mut self, root: NodeId, bindings: &Bindings) -> Result<Tensor, GraphError> {
        for i in 0..=root.0 {
            let op = self.nodes[i].op.clone();
            let (value, argmax) = match &op {
                Op::Constant => continue,
                Op::Input(name) => {
                    let bound = bindings
                        .get(name)
                        .ok_or_else(|| GraphError::Unbound(name.clone()))?;
                    (Arc::clone(bound), Vec::new())
                }
                _ => {
                    let (t, argmax) = self.forward_op(&op)?;
                    (Arc::new(t), argmax)
                }
            };
            if self.check_finite && !value.all_finite() {
                return Err(GraphError::NonFinite {
                    op: op.kind().name(),
                    node: i,
                });
            }
            self.nodes[i].value = Some(value);
            self.nodes[i].argmax = argmax;
        }
        Ok(self.val(root)?.clone())
    }

    fn forward_op(&self, op: &Op) -> Result<(Tensor, Vec<usize>), GraphError> {
        let out = match op {
            Op::Input(_) | Op::Constant => unreachable!("leaves are not computed"),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a)?, self.val(*b)?);
                matmul(a, b)?
            }
            Op::Add(a, b) => zip_same("add", self.val(*a)?, self.val(*b)?, |x, y| x + y)?,
            Op::Sub(a, b) => zip_same("sub", self.val(*a)?, self.val(*b)?, |x, y| x - y)?,
            Op::Mul(a, b) => zip_same("mul", self.val(*a)?, self.val(*b)?, |x, y| x * y)?,
            Op::Scale(a, c) => map(self.val(*a)?, |x| x * c),
            Op::Sigmoid(a) => map(self.val(*a)?, sigmoid),
            Op::Tanh(a) => map(self.val(*a)?, f64::tanh),
            Op::Dropout(a, mask) => zip_same("dropout", self.val(*a)?, mask, |x, m| x * m)?,
            Op::Concat(parts, axis) => {
                let vals = parts
                    .iter()
                    .map(|p| self.val(*p))
                    .collect::<Result<Vec<_>, _>>()?;
                concat(&vals, *axis)?
            }
            Op::MaxAxis(a, axis) => return max_axis(self.val(*a)?, *axis),
            Op::Softmax(a) => softmax(self.val(*a)?)?,
            Op::LogSumExp(a, axis) => log_sum_exp(self.val(*a)?, *axis)?,
            Op::Slice {
                src,
                axis,
                start,
                len,
            } => slice(self.val(*src)?, *axis, *start, *len)?,
            Op::Reshape(a, shape) => self.val(*a)?.clone().reshaped(shape)?,
            Op::Gather(a, rows) => gather(self.val(*a)?, rows)?,
            Op::Sum(a) => Tensor::scalar(self.val(*a)?.data().iter().sum()),
        };
        Ok((out, Vec::new()))
    }

    /// Gradient of the scalar `root` with respect to every named input of
    /// the graph. Inputs that do not influence the root get zero tensors.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, GraphError> {
        let root_val = self.val(root)?;
        if !root_val.is_scalar() {
            return Err(GraphError::NotScalar(root_val.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::filled(root_val.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input(_) | Op::Constant => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.val(*a)?, self.val(*b)?);
                    matmul_backward(&g, av, bv, &mut adj, *a, *b);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, self.val(*a)?.shape()).add_assign(&g);
                    accumulate(&mut adj, *b, self.val(*b)?.shape()).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, self.val(*a)?.shape()).add_assign(&g);
                    let gb = accumulate(&mut adj, *b, self.val(*b)?.shape());
                    for (t, d) in gb.data_mut().iter_mut().zip(g.data()) {
                        *t -= d;
                    }
                }
                Op::Scale(a, c) => {
                    let ga = accumulate(&mut adj, *a, g.shape());
                    for (t, d) in ga.data_mut().iter_mut().zip(g.data()) {
                        *t += c * d;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = self.val(NodeId(i))?;
                    let ga = accumulate(&mut adj, *a, y.shape());
                    for ((t, d), y) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *t += d * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let y = self.val(NodeId(i))?;
                    let ga = accumulate(&mut adj, *a, y.shape());
                    for ((t, d), y) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *t += d * (1.0 - y * y);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.val(*a)?, self.val(*b)?);
                    let ga = accumulate(&mut adj, *a, av.shape());
                    for ((t, d), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *t += d * y;
                    }
                    let gb = accumulate(&mut adj, *b, bv.shape());
                    for ((t, d), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *t += d * x;
                    }
                }
                Op::Dropout(a, mask) => {
                    let ga = accumulate(&mut adj, *a, mask.shape());
                    for ((t, d), m) in ga.data_mut().iter_mut().zip(g.data()).zip(mask.data()) {
                        *t += d * m;
                    }
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.val(*p)?;
                        let extent = if pv.rank() == 1 { pv.len() } else { pv.shape()[*axis] };
                        let piece = slice(&g, *axis, offset, extent)
                            .expect("concat adjoint slice is in range");
                        accumulate(&mut adj, *p, pv.shape()).add_assign(&piece);
                        offset += extent;
                    }
                }
                Op::MaxAxis(a, axis) => {
                    let av = self.val(*a)?;
                    let ga = accumulate(&mut adj, *a, av.shape());
                    for (j, (&win, d)) in node.argmax.iter().zip(g.data()).enumerate() {
                        let flat = match (av.rank(), axis) {
                            (1, _) => win,
                            (_, 0) => win * av.cols() + j,
                            _ => j * av.cols() + win,
                        };
                        ga.data_mut()[flat] += d;
                    }
                }
                Op::Softmax(a) => {
                    let y = self.val(NodeId(i))?;
                    let dot: f64 = g.data().iter().zip(y.data()).map(|(d, y)| d * y).sum();
                    let ga = accumulate(&mut adj, *a, y.shape());
                    for ((t, d), y) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *t += y * (d - dot);
                    }
                }
                Op::LogSumExp(a, axis) => {
                    let av = self.val(*a)?;
                    let out = self.val(NodeId(i))?;
                    let ga = accumulate(&mut adj, *a, av.shape());
                    if av.rank() == 1 {
                        let (lse, d) = (out.item(), g.item());
                        for (t, x) in ga.data_mut().iter_mut().zip(av.data()) {
                            *t += d * (x - lse).exp();
                        }
                    } else {
                        let cols = av.cols();
                        for r in 0..av.rows() {
                            for c in 0..cols {
                                let k = if *axis == 0 { c } else { r };
                                let w = (av.at(r, c) - out.data()[k]).exp();
                                ga.data_mut()[r * cols + c] += g.data()[k] * w;
                            }
                        }
                    }
                }
                Op::Slice {
                    src,
                    axis,
                    start,
                    len,
                } => {
                    let sv = self.val(*src)?;
                    let gs = accumulate(&mut adj, *src, sv.shape());
                    if sv.rank() == 1 {
                        for (k, d) in g.data().iter().enumerate() {
                            gs.data_mut()[start + k] += d;
                        }
                    } else {
                        let cols = sv.cols();
                        let gcols = g.cols();
                        for r in 0..g.rows() {
                            for c in 0..gcols {
                                let (sr, sc) = if *axis == 0 { (start + r, c) } else { (r, start + c) };
                                gs.data_mut()[sr * cols + sc] += g.data()[r * gcols + c];
                            }
                        }
                        let _ = len;
                    }
                }
                Op::Reshape(a, _) => {
                    let av = self.val(*a)?;
                    let ga = accumulate(&mut adj, *a, av.shape());
                    for (t, d) in ga.data_mut().iter_mut().zip(g.data()) {
                        *t += d;
                    }
                }
                Op::Gather(a, rows) => {
                    let av = self.val(*a)?;
                    let cols = av.cols();
                    let ga = accumulate(&mut adj, *a, av.shape());
                    for (k, row) in rows.iter().enumerate() {
                        if let Some(r) = row {
                            let dst = &mut ga.data_mut()[r * cols..(r + 1) * cols];
                            for (t, d) in dst.iter_mut().zip(&g.data()[k * cols..(k + 1) * cols]) {
                                *t += d;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let av = self.val(*a)?;
                    let d = g.item();
                    let ga = accumulate(&mut adj, *a, av.shape());
                    for t in ga.data_mut() {
                        *t += d;
                    }
                }
            }
        }

        let mut grads = Gradients::new();
        for (name, id) in &self.inputs {
            if id.0 > root.0 {
                continue;
            }
            let grad = match adj[id.0].take() {
                Some(g) => g,
                None => Tensor::zeros(self.val(*id)?.shape()),
            };
            grads.insert(name.clone(), grad);
        }
        Ok(grads)
    }
}

fn accumulate<'a>(adj: &'a mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'a mut Tensor {
    adj[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn zip_same(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, GraphError> {
    if a.shape() != b.shape() {
        return Err(GraphError::ShapeMismatch {
            op,
            shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, GraphError> {
    let mismatch = || GraphError::ShapeMismatch {
        op: "matmul",
        shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
    };
    if a.rank() != 2 || a.cols() != b.rows() {
        return Err(mismatch());
    }
    let (m, k) = (a.rows(), a.cols());
    if b.rank() == 1 {
        let out = (0..m)
            .map(|i| a.row(i).iter().zip(b.data()).map(|(x, y)| x * y).sum())
            .collect();
        return Ok(Tensor::vector(out));
    }
    let n = b.cols();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a.row(i).iter().enumerate().take(k) {
            for (o, &bv) in orow.iter_mut().zip(b.row(p)) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

fn matmul_backward(g: &Tensor, a: &Tensor, b: &Tensor, adj: &mut [Option<Tensor>], ia: NodeId, ib: NodeId) {
    let (m, k) = (a.rows(), a.cols());
    if b.rank() == 1 {
        {
            let ga = accumulate(adj, ia, a.shape());
            let gd = ga.data_mut();
            for i in 0..m {
                let gi = g.data()[i];
                if gi == 0.0 {
                    continue;
                }
                for (t, &bv) in gd[i * k..(i + 1) * k].iter_mut().zip(b.data()) {
                    *t += gi * bv;
                }
            }
        }
        let gb = accumulate(adj, ib, b.shape());
        let gbd = gb.data_mut();
        for i in 0..m {
            let gi = g.data()[i];
            if gi == 0.0 {
                continue;
            }
            for (t, &av) in gbd.iter_mut().zip(a.row(i)) {
                *t += gi * av;
            }
        }
        return;
    }
    let n = b.cols();
    {
        // dA = G Bᵀ
        let ga = accumulate(adj, ia, a.shape());
        let gd = ga.data_mut();
        for i in 0..m {
            let grow = &g.data()[i * n..(i + 1) * n];
            for p in 0..k {
                let s: f64 = grow.iter().zip(b.row(p)).map(|(x, y)| x * y).sum();
                gd[i * k + p] += s;
            }
        }
    }
    // dB = Aᵀ G
    let gb = accumulate(adj, ib, b.shape());
    let gbd = gb.data_mut();
    for i in 0..m {
        let grow = &g.data()[i * n..(i + 1) * n];
        for (p, &aip) in a.row(i).iter().enumerate() {
            for (t, &gv) in gbd[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *t += aip * gv;
            }
        }
    }
}

fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor, GraphError> {
    let mismatch = || GraphError::ShapeMismatch {
        op: "concat",
        shapes: parts.iter().map(|p| p.shape().to_vec()).collect(),
    };
    let first = parts.first().ok_or(GraphError::InvalidArgument {
        op: "concat",
        reason: "no operands".into(),
    })?;
    if parts.iter().any(|p| p.rank() != first.rank()) || axis >= first.rank() {
        return Err(mismatch());
    }
    if first.rank() == 1 {
        let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        return Ok(Tensor::vector(data));
    }
    if axis == 0 {
        let cols = first.cols();
        if parts.iter().any(|p| p.cols() != cols) {
            return Err(mismatch());
        }
        let rows = parts.iter().map(|p| p.rows()).sum();
        let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        return Ok(Tensor::matrix(rows, cols, data));
    }
    let rows = first.rows();
    if parts.iter().any(|p| p.rows() != rows) {
        return Err(mismatch());
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Ok(Tensor::matrix(rows, cols, data))
}

fn check_axis(op: &'static str, a: &Tensor, axis: usize) -> Result<(), GraphError> {
    if axis >= a.rank() {
        return Err(GraphError::InvalidArgument {
            op,
            reason: format!("axis {axis} out of range for shape {:?}", a.shape()),
        });
    }
    Ok(())
}

/// Reduction lanes: for each output coordinate, the flat indices it reduces.
fn lanes(a: &Tensor, axis: usize) -> Vec<Vec<usize>> {
    if a.rank() == 1 {
        return vec![(0..a.len()).collect()];
    }
    let (rows, cols) = (a.rows(), a.cols());
    if axis == 0 {
        (0..cols).map(|c| (0..rows).map(|r| r * cols + c).collect()).collect()
    } else {
        (0..rows).map(|r| (0..cols).map(|c| r * cols + c).collect()).collect()
    }
}

fn max_axis(a: &Tensor, axis: usize) -> Result<(Tensor, Vec<usize>), GraphError> {
    check_axis("max_axis", a, axis)?;
    let mut out = Vec::new();
    let mut arg = Vec::new();
    for lane in lanes(a, axis) {
        let mut best = 0;
        for (pos, &flat) in lane.iter().enumerate() {
            if a.data()[flat] > a.data()[lane[best]] {
                best = pos;
            }
        }
        out.push(a.data()[lane[best]]);
        arg.push(best);
    }
    Ok((Tensor::vector(out), arg))
}

fn log_sum_exp(a: &Tensor, axis: usize) -> Result<Tensor, GraphError> {
    check_axis("log_sum_exp", a, axis)?;
    let out = lanes(a, axis)
        .into_iter()
        .map(|lane| {
            let vals: Vec<f64> = lane.iter().map(|&i| a.data()[i]).collect();
            logsumexp(&vals)
        })
        .collect();
    Ok(Tensor::vector(out))
}

pub fn logsumexp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(a: &Tensor) -> Result<Tensor, GraphError> {
    if a.rank() != 1 {
        return Err(GraphError::ShapeMismatch {
            op: "softmax",
            shapes: vec![a.shape().to_vec()],
        });
    }
    let m = a.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = a.data().iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(Tensor::vector(exps.into_iter().map(|e| e / z).collect()))
}

fn slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor, GraphError> {
    check_axis("slice", a, axis)?;
    let extent = a.shape()[axis];
    if len == 0 || start + len > extent {
        return Err(GraphError::InvalidArgument {
            op: "slice",
            reason: format!("range {start}..{} out of bounds for shape {:?} axis {axis}", start + len, a.shape()),
        });
    }
    if a.rank() == 1 {
        return Ok(Tensor::vector(a.data()[start..start + len].to_vec()));
    }
    let cols = a.cols();
    if axis == 0 {
        let data = a.data()[start * cols..(start + len) * cols].to_vec();
        return Ok(Tensor::matrix(len, cols, data));
    }
    let mut data = Vec::with_capacity(a.rows() * len);
    for r in 0..a.rows() {
        data.extend_from_slice(&a.row(r)[start..start + len]);
    }
    Ok(Tensor::matrix(a.rows(), len, data))
}

fn gather(a: &Tensor, rows: &[Option<usize>]) -> Result<Tensor, GraphError> {
    if a.rank() != 2 || rows.is_empty() {
        return Err(GraphError::InvalidArgument {
            op: "gather",
            reason: format!("needs a matrix and at least one row, got {:?}", a.shape()),
        });
    }
    let cols = a.cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for row in rows {
        match row {
            Some(r) if *r < a.rows() => data.extend_from_slice(a.row(*r)),
            Some(r) => {
                return Err(GraphError::InvalidArgument {
                    op: "gather",
                    reason: format!("row {r} out of range for {} rows", a.rows()),
                })
            }
            None => data.extend(std::iter::repeat_n(0.0, cols)),
        }
    }
    Ok(Tensor::matrix(rows.len(), cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> Bindings {
        pairs
            .iter()
            .map(|(n, t)| (n.to_string(), Arc::new(t.clone())))
            .collect()
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.sigmoid(x);
        let t = g.tanh(x);
        let b = bind(&[("x", Tensor::scalar(0.0))]);
        assert_eq!(g.evaluate(s, &b).unwrap().item(), 0.5);
        assert_eq!(g.evaluate(t, &b).unwrap().item(), 0.0);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["x"].item(), 0.25);
    }

    #[test]
    fn softmax_of_uniform_logits() {
        for a in [-3.0, 0.0, 7.5, 700.0] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(vec![a; 3]));
            let s = g.softmax(x);
            let out = g.evaluate(s, &Bindings::new()).unwrap();
            for v in out.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.input("x");
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        let b = bind(&[("x", Tensor::vector(vec![1.0, 2.0, 3.0]))]);
        assert_eq!(g.evaluate(s, &b).unwrap().item(), 14.0);
        assert_eq!(g.backward(s).unwrap()["x"].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_inputs_get_zero_gradients() {
        let mut g = Graph::new();
        let x = g.input("x");
        let _unused = g.input("w");
        let s = g.sum(x);
        let b = bind(&[("x", Tensor::vector(vec![1.0, 2.0])), ("w", Tensor::matrix(2, 2, vec![1.0; 4]))]);
        g.evaluate(s, &b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["w"], Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(GraphError::NotEvaluated(_))));
        let b = bind(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        g.evaluate(y, &b).unwrap();
        assert!(matches!(g.backward(y), Err(GraphError::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = g.constant(Tensor::vector(vec![0.0; 2]));
        let c = g.matmul(a, b);
        let err = g.evaluate(c, &Bindings::new()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn unbound_input_is_an_error() {
        let mut g = Graph::new();
        let x = g.input("x");
        assert!(matches!(g.evaluate(x, &Bindings::new()), Err(GraphError::Unbound(_))));
    }

    #[test]
    fn non_finite_is_caught_when_checking() {
        let mut g = Graph::new();
        g.set_check_finite(true);
        let x = g.input("x");
        let y = g.scale(x, 2.0);
        let b = bind(&[("x", Tensor::scalar(f64::MAX))]);
        assert!(matches!(g.evaluate(y, &b), Err(GraphError::NonFinite { op: "scale", .. })));
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]));
        let c = g.concat(&[a, b], 1);
        let sa = g.slice(c, 1, 0, 2);
        let sb = g.slice(c, 1, 2, 1);
        let empty = Bindings::new();
        assert_eq!(g.evaluate(sb, &empty).unwrap(), Tensor::matrix(2, 1, vec![5.0, 6.0]));
        assert_eq!(g.value(sa).unwrap(), &Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut g = Graph::new();
        let x = g.input("x");
        let m = g.max_axis(x, 0);
        let b = bind(&[("x", Tensor::vector(vec![1.0, 3.0, 3.0]))]);
        assert_eq!(g.evaluate(m, &b).unwrap().item(), 3.0);
        assert_eq!(g.backward(m).unwrap()["x"].data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_with_zero_rows() {
        let mut g = Graph::new();
        let e = g.input("e");
        let rows = g.gather(e, vec![None, Some(1), Some(1), None]);
        let s = g.sum(rows);
        let b = bind(&[("e", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]))]);
        assert_eq!(g.evaluate(s, &b).unwrap().item(), 14.0);
        assert_eq!(g.backward(s).unwrap()["e"].data(), &[0.0, 0.0, 2.0, 2.0]);
    }
}
