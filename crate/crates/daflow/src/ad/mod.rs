//! Reverse-mode automatic differentiation over dense float64 matrices.
//!
//! A [`Tape`] records an append-only, topologically ordered sequence of
//! [`Node`]s (vectors are n x 1 matrices). [`Tape::backward`] walks the tape
//! once in strictly decreasing index order and returns exact adjoints for
//! every differentiable leaf. A tape is single-writer: one filter run records
//! and backpropagates on one logical thread; independent runs use independent
//! tapes.

pub mod linalg;
pub mod ops;

pub use ops::{Op, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug)]
pub struct Node {
    pub value: Value,
    pub op: Op,
    pub parents: Vec<NodeId>,
    pub requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

/// Adjoints produced by one backward pass. Only differentiable leaves are
/// retained; everything else is exactly zero by construction.
pub struct Gradients {
    adj: Vec<Option<Value>>,
}

impl Gradients {
    /// Adjoint of a leaf, if any path connected it to the seed.
    pub fn wrt(&self, id: NodeId) -> Option<&Value> {
        self.adj.get(id.0).and_then(|x| x.as_ref())
    }

    /// Adjoint of a leaf, zeros when it is off every path to the seed.
    pub fn wrt_or_zero(&self, tape: &Tape, id: NodeId) -> Value {
        match self.wrt(id) {
            Some(v) => v.clone(),
            None => Value::zeros(tape.value(id).dim()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id.0].value
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    fn push(&mut self, value: Value, op: Op, parents: Vec<NodeId>) -> NodeId {
        let requires_grad = match op {
            Op::Leaf { differentiable } => differentiable,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        id
    }

    fn record(&mut self, op: Op, parents: Vec<NodeId>) -> Result<NodeId> {
        let values: Vec<&Value> = parents.iter().map(|p| self.value(*p)).collect();
        let value = ops::eval(&op, &values)?;
        Ok(self.push(value, op, parents))
    }

    /// Differentiable parameter leaf. Input must be finite.
    pub fn leaf(&mut self, value: Value) -> Result<NodeId> {
        self.leaf_impl(value, true)
    }

    /// Constant leaf: backward never writes its adjoint. Used for data,
    /// fixed matrices, and reparameterized noise draws.
    pub fn constant(&mut self, value: Value) -> Result<NodeId> {
        self.leaf_impl(value, false)
    }

    fn leaf_impl(&mut self, value: Value, differentiable: bool) -> Result<NodeId> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let id = self.push(value, Op::Leaf { differentiable }, vec![]);
        if differentiable {
            self.leaves.push(id);
        }
        Ok(id)
    }

    pub fn const_scalar(&mut self, x: f64) -> Result<NodeId> {
        self.constant(Value::from_elem((1, 1), x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub, vec![a, b])
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Hadamard, vec![a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Matmul, vec![a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Transpose, vec![a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Scale(c), vec![a])
    }

    /// Scalar node (1x1) times matrix node.
    pub fn smul(&mut self, s: NodeId, a: NodeId) -> Result<NodeId> {
        self.record(Op::Smul, vec![s, a])
    }

    pub fn shift_rows(&mut self, a: NodeId, offset: i64, circular: bool) -> Result<NodeId> {
        self.record(Op::ShiftRows { offset, circular }, vec![a])
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let top_rows = self.value(a).nrows();
        self.record(Op::ConcatRows { top_rows }, vec![a, b])
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.record(Op::SliceRows { start, len }, vec![a])
    }

    pub fn slice_channels(
        &mut self,
        a: NodeId,
        batch: usize,
        ch: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId> {
        self.record(Op::SliceChannels { batch, ch, start, len }, vec![a])
    }

    pub fn concat_channels(
        &mut self,
        a: NodeId,
        b: NodeId,
        batch: usize,
        ch_a: usize,
        ch_b: usize,
    ) -> Result<NodeId> {
        self.record(Op::ConcatChannels { batch, ch_a, ch_b }, vec![a, b])
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.record(Op::Reshape { rows, cols }, vec![a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum, vec![a])
    }

    pub fn col_sums(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::ColSums, vec![a])
    }

    pub fn mean_cols(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::MeanCols, vec![a])
    }

    pub fn broadcast_col(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        self.record(Op::BroadcastCol { cols }, vec![a])
    }

    pub fn diag_from_col(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::DiagFromCol, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Exp, vec![a])
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Softplus, vec![a])
    }

    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::LogSumExp, vec![a])
    }

    /// Lower Cholesky factor of a symmetric PSD node (symmetrize, then one
    /// jitter retry of `1e-10 tr(A)/d` before failing).
    pub fn cholesky(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Cholesky, vec![a])
    }

    pub fn psd_solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::PsdSolve, vec![a, b])
    }

    pub fn logdet(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Logdet, vec![a])
    }

    pub fn conv1d_circular(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        batch: usize,
        in_ch: usize,
        out_ch: usize,
        k: usize,
    ) -> Result<NodeId> {
        self.record(Op::Conv1dCircular { batch, in_ch, out_ch, k }, vec![x, kernel, bias])
    }

    /// log N(y; mu, Sigma) as a scalar node, differentiable in `mu` and
    /// `Sigma`. `y` is typically a constant leaf.
    pub fn gaussian_logpdf(&mut self, y: NodeId, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
        let d = self.value(mu).nrows();
        if self.value(y).dim() != (d, 1) || self.value(mu).ncols() != 1 {
            return Err(Error::Shape {
                op: "gaussian_logpdf",
                detail: format!(
                    "y {:?}, mu {:?}",
                    self.value(y).dim(),
                    self.value(mu).dim()
                ),
            });
        }
        if self.value(sigma).dim() != (d, d) {
            return Err(Error::Shape {
                op: "gaussian_logpdf",
                detail: format!("sigma {:?} for dim {}", self.value(sigma).dim(), d),
            });
        }
        let r = self.sub(y, mu)?;
        let z = self.psd_solve(sigma, r)?;
        let quad = self.hadamard(r, z)?;
        let quad = self.sum(quad)?;
        let ld = self.logdet(sigma)?;
        let cst = self.const_scalar(d as f64 * (2.0 * std::f64::consts::PI).ln())?;
        let t = self.add(ld, cst)?;
        let t = self.add(t, quad)?;
        self.scale(t, -0.5)
    }

    /// Reverse pass from a scalar seed. Visits nodes in strictly decreasing
    /// index order exactly once; adjoints of interior nodes are dropped as
    /// soon as they have been propagated.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        if self.value(seed).dim() != (1, 1) {
            return Err(Error::NonScalarSeed);
        }
        let mut adj: Vec<Option<Value>> = vec![None; self.nodes.len()];
        if self.nodes[seed.0].requires_grad {
            adj[seed.0] = Some(Value::from_elem((1, 1), 1.0));
        }
        for i in (0..=seed.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf { .. }) {
                continue; // leaf adjoints stay in place
            }
            let Some(g) = adj[i].take() else { continue };
            // split borrows: collect parent values, then per-position sink
            // slots. A parent appearing in several positions gets one primed
            // slot (holding its running adjoint) plus empty extras, merged
            // back by accumulation below.
            let values: Vec<&Value> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let mut seen: Vec<NodeId> = Vec::new();
            let mut slots: Vec<Option<Option<Value>>> = node
                .parents
                .iter()
                .map(|p| {
                    if !self.nodes[p.0].requires_grad {
                        None
                    } else if seen.contains(p) {
                        Some(None)
                    } else {
                        seen.push(*p);
                        Some(adj[p.0].take())
                    }
                })
                .collect();
            {
                let mut sinks: Vec<Option<&mut Option<Value>>> =
                    slots.iter_mut().map(|s| s.as_mut()).collect();
                ops::propagate(&node.op, &g, &values, &node.value, &mut sinks)?;
            }
            for (p, slot) in node.parents.iter().zip(slots.into_iter()) {
                if let Some(Some(acc)) = slot {
                    ops::accumulate(&mut adj[p.0], acc);
                }
            }
        }
        // retain only differentiable leaves
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf { differentiable: true }) {
                adj[i] = None;
            }
        }
        Ok(Gradients { adj })
    }

    /// Recompute every node from its parents and compare bit-exactly with the
    /// recorded values. Returns the first mismatching node index, if any.
    pub fn replay_check(&self) -> Result<Option<usize>> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let values: Vec<&Value> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let fresh = ops::eval(&node.op, &values)?;
            if fresh.dim() != node.value.dim()
                || fresh
                    .iter()
                    .zip(node.value.iter())
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Ok(Some(i));
            }
        }
        Ok(None)
    }
}
