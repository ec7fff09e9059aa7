//! Minimal reverse-mode differentiation engine over dense real tensors.
//!
//! An [`ExprGraph`] is an append-only DAG of primitive operations. Nodes are
//! added through typed builder methods that validate shapes eagerly, so a
//! malformed graph fails at construction time with an error naming the node.
//! Values flow in at evaluation time through [`Bindings`]: every named leaf
//! (trainable parameter or frozen constant) is bound to a tensor, which keeps
//! graphs immutable and lets schedules re-bind hyperparameters such as the
//! smooth-step width without rebuilding.
//!
//! The op set is exactly what the gates and models require. Two ops deserve a
//! note:
//!
//! * `XLogX` computes `x ln x` with the convention `0 ln 0 = 0` and a reverse
//!   rule that returns 0 at `x = 0`. Entropy regularizers hit exact zeros once
//!   the smooth-step saturates, and the true gradient through the saturated
//!   path is the limit 0, so this convention keeps gradients finite and exact.
//! * `TopKSoftmax` is a fused masked softmax: entries outside the top-k are
//!   exactly zero in the forward pass and receive exactly zero gradient. No
//!   infinite sentinel ever enters a tensor.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt;

use crate::tensor::Tensor;

/// Identifier of a node inside one [`ExprGraph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Reduction extent for `Sum` and `Mean`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Reduce {
    /// Reduce every element down to a scalar.
    All,
    /// Reduce along the last axis only.
    LastAxis,
}

/// Primitive operations. Each kind has a forward rule and a reverse
/// (vector-Jacobian) rule.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf { name: String, trainable: bool },
    Lit { value: Tensor },
    MatMul { lhs: NodeId, rhs: NodeId, transpose_rhs: bool },
    Add { lhs: NodeId, rhs: NodeId },
    Sub { lhs: NodeId, rhs: NodeId },
    Mul { lhs: NodeId, rhs: NodeId },
    Relu { input: NodeId },
    Square { input: NodeId },
    Softmax { input: NodeId },
    TopKSoftmax { input: NodeId, k: usize },
    SmoothStep { input: NodeId, gamma: NodeId },
    Log { input: NodeId },
    Exp { input: NodeId },
    XLogX { input: NodeId },
    Sum { input: NodeId, reduce: Reduce },
    Mean { input: NodeId, reduce: Reduce },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize, stop: usize },
    Reshape { input: NodeId },
    ScalarMul { input: NodeId, scale: f64 },
}

impl Op {
    fn kind_name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Lit { .. } => "lit",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Relu { .. } => "relu",
            Op::Square { .. } => "square",
            Op::Softmax { .. } => "softmax",
            Op::TopKSoftmax { .. } => "topk_softmax",
            Op::SmoothStep { .. } => "smooth_step",
            Op::Log { .. } => "log",
            Op::Exp { .. } => "exp",
            Op::XLogX { .. } => "xlogx",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::ScalarMul { .. } => "scalar_mul",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Lit { .. } => vec![],
            Op::MatMul { lhs, rhs, .. }
            | Op::Add { lhs, rhs }
            | Op::Sub { lhs, rhs }
            | Op::Mul { lhs, rhs } => vec![*lhs, *rhs],
            Op::SmoothStep { input, gamma } => vec![*input, *gamma],
            Op::Relu { input }
            | Op::Square { input }
            | Op::Softmax { input }
            | Op::TopKSoftmax { input, .. }
            | Op::Log { input }
            | Op::Exp { input }
            | Op::XLogX { input }
            | Op::Sum { input, .. }
            | Op::Mean { input, .. }
            | Op::Slice { input, .. }
            | Op::Reshape { input }
            | Op::ScalarMul { input, .. } => vec![*input],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

/// Error raised while building or running a graph.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    /// Incompatible operand shapes; `node` names the offending operation.
    ShapeMismatch { node: String, detail: String },
    /// A named leaf was not supplied a value at evaluation time.
    MissingBinding { name: String },
    /// A bound tensor does not match the leaf's declared shape.
    BindingShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    /// Gradient was requested of a node that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// A node id does not exist in this graph.
    UnknownNode { id: usize },
    /// A leaf name was reused with a different shape or trainability.
    DuplicateLeaf { name: String },
    /// Structurally invalid operation (bad slice bounds, k out of range, ...).
    InvalidOp { detail: String },
    /// A numeric evaluation produced NaN or infinity.
    NonFinite { context: String },
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::ShapeMismatch { node, detail } => {
                write!(f, "shape mismatch at {}: {}", node, detail)
            }
            GraphError::MissingBinding { name } => write!(f, "missing binding for leaf '{}'", name),
            GraphError::BindingShape { name, expected, got } => write!(
                f,
                "binding for '{}' has shape {:?}, expected {:?}",
                name, got, expected
            ),
            GraphError::NonScalarLoss { shape } => {
                write!(f, "loss node must be scalar, got shape {:?}", shape)
            }
            GraphError::UnknownNode { id } => write!(f, "unknown node id {}", id),
            GraphError::DuplicateLeaf { name } => {
                write!(f, "leaf '{}' redeclared with different shape or trainability", name)
            }
            GraphError::InvalidOp { detail } => write!(f, "invalid operation: {}", detail),
            GraphError::NonFinite { context } => write!(f, "non-finite value: {}", context),
        }
    }
}

impl std::error::Error for GraphError {}

/// Values for the named leaves of a graph, held by reference.
#[derive(Default)]
pub struct Bindings<'a> {
    map: HashMap<&'a str, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Bindings { map: HashMap::new() }
    }

    pub fn insert(&mut self, name: &'a str, value: &'a Tensor) {
        self.map.insert(name, value);
    }

    /// Binds every parameter of a store under its own name.
    pub fn insert_store(&mut self, store: &'a ParamStore) {
        for (name, value) in store.iter() {
            self.map.insert(name, value);
        }
    }

    /// Binds every tensor of a named map.
    pub fn insert_map(&mut self, map: &'a BTreeMap<String, Tensor>) {
        for (name, value) in map.iter() {
            self.map.insert(name.as_str(), value);
        }
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Iteration order is the lexicographic order of names, which makes every
/// consumer (optimizers, flattening, serialization) deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Concatenates all tensors into one flat vector (name order).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.map.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Writes a flat vector produced by [`ParamStore::flatten`] back in place.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        debug_assert_eq!(flat.len(), self.numel());
        let mut at = 0;
        for t in self.map.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }
}

/// Forward values for every node of a graph, in node order.
pub struct EvalTrace {
    values: Vec<Tensor>,
}

impl EvalTrace {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A directed acyclic computation graph over tensors.
///
/// Nodes are appended in topological order by construction: an operation can
/// only reference ids that already exist, so cycles are impossible.
pub struct ExprGraph {
    nodes: Vec<(Op, Vec<usize>)>,
    leaves: BTreeMap<String, NodeId>,
}

impl Default for ExprGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl ExprGraph {
    pub fn new() -> Self {
        ExprGraph { nodes: Vec::new(), leaves: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].1
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].0
    }

    /// Named leaves with their ids, in name order.
    pub fn leaves(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.leaves.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Names of trainable leaves, in name order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.leaves
            .iter()
            .filter(|(_, id)| matches!(self.nodes[id.0].0, Op::Leaf { trainable: true, .. }))
            .map(|(k, _)| k.clone())
            .collect()
    }

    fn check_id(&self, id: NodeId) -> Result<(), GraphError> {
        if id.0 >= self.nodes.len() {
            Err(GraphError::UnknownNode { id: id.0 })
        } else {
            Ok(())
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push((op, shape));
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &str, detail: String) -> GraphError {
        GraphError::ShapeMismatch { node: format!("{}(new node #{})", op, self.nodes.len()), detail }
    }

    /// Declares (or re-fetches) a named leaf. A leaf name maps to exactly one
    /// node: redeclaring it with an identical signature returns the same id.
    pub fn leaf(
        &mut self,
        name: &str,
        shape: &[usize],
        trainable: bool,
    ) -> Result<NodeId, GraphError> {
        if let Some(&id) = self.leaves.get(name) {
            let (op, existing) = &self.nodes[id.0];
            let same = match op {
                Op::Leaf { trainable: t, .. } => *t == trainable && existing == shape,
                _ => false,
            };
            return if same {
                Ok(id)
            } else {
                Err(GraphError::DuplicateLeaf { name: name.to_string() })
            };
        }
        if shape.len() > 2 {
            return Err(self.mismatch("leaf", format!("rank {} unsupported", shape.len())));
        }
        let id = self.push(Op::Leaf { name: name.to_string(), trainable }, shape.to_vec());
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Embeds a constant tensor directly in the graph.
    pub fn lit(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Lit { value }, shape)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.lit(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, GraphError> {
        self.matmul_impl(lhs, rhs, false)
    }

    /// `lhs @ rhs^T`; `rhs` must be rank 2.
    pub fn matmul_nt(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, GraphError> {
        self.matmul_impl(lhs, rhs, true)
    }

    fn matmul_impl(
        &mut self,
        lhs: NodeId,
        rhs: NodeId,
        transpose_rhs: bool,
    ) -> Result<NodeId, GraphError> {
        self.check_id(lhs)?;
        self.check_id(rhs)?;
        let ls = self.shape(lhs).to_vec();
        let rs = self.shape(rhs).to_vec();
        if ls.is_empty() || rs.is_empty() {
            return Err(self.mismatch("matmul", "scalar operand".into()));
        }
        if transpose_rhs && rs.len() != 2 {
            return Err(self.mismatch("matmul", "transposed rhs must be rank 2".into()));
        }
        let (_m, k_l) = match ls.len() {
            1 => (1, ls[0]),
            _ => (ls[0], ls[1]),
        };
        let (k_r, _n) = match (rs.len(), transpose_rhs) {
            (1, _) => (rs[0], 1),
            (_, false) => (rs[0], rs[1]),
            (_, true) => (rs[1], rs[0]),
        };
        if k_l != k_r {
            return Err(self.mismatch(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?} (transpose_rhs={})", ls, rs, transpose_rhs),
            ));
        }
        let shape = matmul_out_shape(&ls, &rs, transpose_rhs);
        Ok(self.push(Op::MatMul { lhs, rhs, transpose_rhs }, shape))
    }

    fn binary(
        &mut self,
        name: &'static str,
        lhs: NodeId,
        rhs: NodeId,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, GraphError> {
        self.check_id(lhs)?;
        self.check_id(rhs)?;
        let ls = self.shape(lhs);
        let rs = self.shape(rhs);
        match broadcast_kind(ls, rs) {
            Some((_, shape)) => Ok(self.push(make(lhs, rhs), shape)),
            None => Err(self.mismatch(name, format!("cannot broadcast {:?} with {:?}", ls, rs))),
        }
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, GraphError> {
        self.binary("add", lhs, rhs, |lhs, rhs| Op::Add { lhs, rhs })
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, GraphError> {
        self.binary("sub", lhs, rhs, |lhs, rhs| Op::Sub { lhs, rhs })
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, GraphError> {
        self.binary("mul", lhs, rhs, |lhs, rhs| Op::Mul { lhs, rhs })
    }

    fn unary(
        &mut self,
        input: NodeId,
        make: impl Fn(NodeId) -> Op,
    ) -> Result<NodeId, GraphError> {
        self.check_id(input)?;
        let shape = self.shape(input).to_vec();
        Ok(self.push(make(input), shape))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        self.unary(input, |input| Op::Relu { input })
    }

    pub fn square(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        self.unary(input, |input| Op::Square { input })
    }

    pub fn log(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        self.unary(input, |input| Op::Log { input })
    }

    pub fn exp(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        self.unary(input, |input| Op::Exp { input })
    }

    /// `x ln x` elementwise with `0 ln 0 = 0`.
    pub fn xlogx(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        self.unary(input, |input| Op::XLogX { input })
    }

    /// Numerically stabilized softmax along the last axis.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        self.check_id(input)?;
        if self.shape(input).is_empty() {
            return Err(self.mismatch("softmax", "requires rank >= 1".into()));
        }
        self.unary(input, |input| Op::Softmax { input })
    }

    /// Softmax over the k largest entries of each row; other entries are
    /// exactly zero and receive exactly zero gradient. Ties are broken in
    /// favor of the lower index.
    pub fn topk_softmax(&mut self, input: NodeId, k: usize) -> Result<NodeId, GraphError> {
        self.check_id(input)?;
        let shape = self.shape(input).to_vec();
        let width = match shape.len() {
            1 => shape[0],
            2 => shape[1],
            _ => return Err(self.mismatch("topk_softmax", "requires rank 1 or 2".into())),
        };
        if k == 0 || k > width {
            return Err(GraphError::InvalidOp {
                detail: format!("topk_softmax k={} out of range 1..={}", k, width),
            });
        }
        Ok(self.push(Op::TopKSoftmax { input, k }, shape))
    }

    /// Elementwise smooth-step of width read from the `gamma` node (a
    /// positive scalar). Gradient flows through the input only.
    pub fn smooth_step(&mut self, input: NodeId, gamma: NodeId) -> Result<NodeId, GraphError> {
        self.check_id(input)?;
        self.check_id(gamma)?;
        if self.shape(gamma).iter().product::<usize>() != 1 {
            return Err(self.mismatch("smooth_step", "gamma must be a scalar node".into()));
        }
        let shape = self.shape(input).to_vec();
        Ok(self.push(Op::SmoothStep { input, gamma }, shape))
    }

    fn reduction(
        &mut self,
        input: NodeId,
        reduce: Reduce,
        make: impl Fn(NodeId, Reduce) -> Op,
    ) -> Result<NodeId, GraphError> {
        self.check_id(input)?;
        let in_shape = self.shape(input);
        let shape = match reduce {
            Reduce::All => vec![],
            Reduce::LastAxis => match in_shape.len() {
                0 => return Err(self.mismatch("reduce", "last-axis reduce of a scalar".into())),
                1 => vec![],
                _ => vec![in_shape[0]],
            },
        };
        Ok(self.push(make(input, reduce), shape))
    }

    pub fn sum_all(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        self.reduction(input, Reduce::All, |input, reduce| Op::Sum { input, reduce })
    }

    pub fn sum_last_axis(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        self.reduction(input, Reduce::LastAxis, |input, reduce| Op::Sum { input, reduce })
    }

    pub fn mean_all(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        self.reduction(input, Reduce::All, |input, reduce| Op::Mean { input, reduce })
    }

    pub fn mean_last_axis(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        self.reduction(input, Reduce::LastAxis, |input, reduce| Op::Mean { input, reduce })
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::InvalidOp { detail: "concat of zero parts".into() });
        }
        for &p in parts {
            self.check_id(p)?;
        }
        let first = self.shape(parts[0]).to_vec();
        let rank = first.len();
        if rank == 0 || axis >= rank {
            return Err(self.mismatch("concat", format!("axis {} invalid for rank {}", axis, rank)));
        }
        let mut out = first.clone();
        out[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank {
                return Err(self.mismatch("concat", "rank mismatch across parts".into()));
            }
            for d in 0..rank {
                if d != axis && s[d] != first[d] {
                    return Err(self.mismatch(
                        "concat",
                        format!("part shape {:?} incompatible with {:?} on axis {}", s, first, axis),
                    ));
                }
            }
            out[axis] += s[axis];
        }
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, out))
    }

    pub fn slice(
        &mut self,
        input: NodeId,
        axis: usize,
        start: usize,
        stop: usize,
    ) -> Result<NodeId, GraphError> {
        self.check_id(input)?;
        let s = self.shape(input).to_vec();
        if axis >= s.len() || start >= stop || stop > s[axis] {
            return Err(GraphError::InvalidOp {
                detail: format!("slice [{}, {}) on axis {} of shape {:?}", start, stop, axis, s),
            });
        }
        let mut out = s;
        out[axis] = stop - start;
        Ok(self.push(Op::Slice { input, axis, start, stop }, out))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        self.check_id(input)?;
        let n: usize = self.shape(input).iter().product();
        if shape.iter().product::<usize>() != n || shape.len() > 2 {
            return Err(self.mismatch(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(input), shape),
            ));
        }
        Ok(self.push(Op::Reshape { input }, shape.to_vec()))
    }

    pub fn scalar_mul(&mut self, input: NodeId, scale: f64) -> Result<NodeId, GraphError> {
        self.check_id(input)?;
        let shape = self.shape(input).to_vec();
        Ok(self.push(Op::ScalarMul { input, scale }, shape))
    }

    pub fn neg(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        self.scalar_mul(input, -1.0)
    }

    /// Chained addition of one or more nodes.
    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        let mut acc = *parts.first().ok_or(GraphError::InvalidOp {
            detail: "add_n of zero parts".into(),
        })?;
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// `softplus(x) = ln(1 + e^x)`, computed stably for any magnitude.
    pub fn softplus(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        // softplus(x) = relu(x) + ln(1 + exp(-|x|))
        let pos = self.relu(input)?;
        let negx = self.neg(input)?;
        let negpart = self.relu(negx)?;
        let absx = self.add(pos, negpart)?;
        let neg_abs = self.neg(absx)?;
        let e = self.exp(neg_abs)?;
        let one = self.scalar(1.0);
        let onepe = self.add(e, one)?;
        let l = self.log(onepe)?;
        self.add(pos, l)
    }

    /// Elementwise logistic sigmoid, stable at large magnitudes.
    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        // sigma(x) = exp(x - softplus(x))
        let sp = self.softplus(input)?;
        let d = self.sub(input, sp)?;
        self.exp(d)
    }

    /// `ln sigma(x) = -softplus(-x)`.
    pub fn log_sigmoid(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let negx = self.neg(input)?;
        let sp = self.softplus(negx)?;
        self.neg(sp)
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, GraphError> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d)?;
        self.mean_all(sq)
    }

    /// Mean binary cross-entropy of logits against {0,1} labels, in the
    /// standard overflow-free form.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: NodeId) -> Result<NodeId, GraphError> {
        // max(l, 0) - l*y + ln(1 + exp(-|l|))
        let pos = self.relu(logits)?;
        let ly = self.mul(logits, labels)?;
        let negl = self.neg(logits)?;
        let negpart = self.relu(negl)?;
        let absl = self.add(pos, negpart)?;
        let neg_abs = self.neg(absl)?;
        let e = self.exp(neg_abs)?;
        let one = self.scalar(1.0);
        let onepe = self.add(e, one)?;
        let softterm = self.log(onepe)?;
        let a = self.sub(pos, ly)?;
        let b = self.add(a, softterm)?;
        self.mean_all(b)
    }

    /// Forward evaluation of every node. Deterministic: identical bindings
    /// produce bitwise-identical outputs.
    pub fn evaluate(&self, bindings: &Bindings<'_>) -> Result<EvalTrace, GraphError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, (op, shape)) in self.nodes.iter().enumerate() {
            let v = match op {
                Op::Leaf { name, .. } => {
                    let t = bindings
                        .get(name)
                        .ok_or_else(|| GraphError::MissingBinding { name: name.clone() })?;
                    if t.shape() != shape.as_slice() {
                        return Err(GraphError::BindingShape {
                            name: name.clone(),
                            expected: shape.clone(),
                            got: t.shape().to_vec(),
                        });
                    }
                    t.clone()
                }
                Op::Lit { value } => value.clone(),
                Op::MatMul { lhs, rhs, transpose_rhs } => {
                    matmul_forward(&values[lhs.0], &values[rhs.0], *transpose_rhs)
                }
                Op::Add { lhs, rhs } => ew(&values[lhs.0], &values[rhs.0], |a, b| a + b),
                Op::Sub { lhs, rhs } => ew(&values[lhs.0], &values[rhs.0], |a, b| a - b),
                Op::Mul { lhs, rhs } => ew(&values[lhs.0], &values[rhs.0], |a, b| a * b),
                Op::Relu { input } => map(&values[input.0], |x| if x > 0.0 { x } else { 0.0 }),
                Op::Square { input } => map(&values[input.0], |x| x * x),
                Op::Softmax { input } => softmax_rows(&values[input.0]),
                Op::TopKSoftmax { input, k } => topk_softmax_rows(&values[input.0], *k),
                Op::SmoothStep { input, gamma } => {
                    let g = values[gamma.0].item();
                    if g <= 0.0 {
                        return Err(GraphError::InvalidOp {
                            detail: format!("smooth_step gamma must be positive, got {}", g),
                        });
                    }
                    map(&values[input.0], |x| smooth_step_value(x, g))
                }
                Op::Log { input } => map(&values[input.0], f64::ln),
                Op::Exp { input } => map(&values[input.0], f64::exp),
                Op::XLogX { input } => map(&values[input.0], xlogx_value),
                Op::Sum { input, reduce } => reduce_forward(&values[input.0], *reduce, false),
                Op::Mean { input, reduce } => reduce_forward(&values[input.0], *reduce, true),
                Op::Concat { parts, axis } => {
                    let tensors: Vec<&Tensor> = parts.iter().map(|p| &values[p.0]).collect();
                    concat_forward(&tensors, *axis)
                }
                Op::Slice { input, axis, start, stop } => {
                    slice_forward(&values[input.0], *axis, *start, *stop)
                }
                Op::Reshape { input } => Tensor::new(shape.clone(), values[input.0].data().to_vec())
                    .expect("reshape validated at construction"),
                Op::ScalarMul { input, scale } => map(&values[input.0], |x| x * scale),
            };
            debug_assert_eq!(v.shape(), shape.as_slice(), "node #{} ({})", idx, op.kind_name());
            values.push(v);
        }
        Ok(EvalTrace { values })
    }

    /// Reverse-mode gradients of a scalar node with respect to every
    /// trainable leaf. Frozen leaves are skipped entirely: their adjoints are
    /// never materialized.
    pub fn gradient(
        &self,
        loss: NodeId,
        bindings: &Bindings<'_>,
    ) -> Result<BTreeMap<String, Tensor>, GraphError> {
        let trace = self.evaluate(bindings)?;
        self.gradient_from_trace(loss, &trace)
    }

    /// Backward pass reusing an existing forward trace.
    pub fn gradient_from_trace(
        &self,
        loss: NodeId,
        trace: &EvalTrace,
    ) -> Result<BTreeMap<String, Tensor>, GraphError> {
        self.check_id(loss)?;
        if trace.len() != self.nodes.len() {
            return Err(GraphError::InvalidOp {
                detail: "trace does not belong to this graph".into(),
            });
        }
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(GraphError::NonScalarLoss { shape: loss_shape.to_vec() });
        }

        // Restrict the backward sweep to ancestors of the loss.
        let mut live = vec![false; self.nodes.len()];
        let mut stack = vec![loss];
        while let Some(id) = stack.pop() {
            if live[id.0] {
                continue;
            }
            live[id.0] = true;
            for inp in self.nodes[id.0].0.inputs() {
                if !live[inp.0] {
                    stack.push(inp);
                }
            }
        }

        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(Tensor::filled(loss_shape, 1.0));

        for i in (0..=loss.0).rev() {
            if !live[i] {
                continue;
            }
            let d = match adjoints[i].take() {
                Some(d) => d,
                None => continue,
            };
            self.backprop_node(i, &d, trace, &mut adjoints);
            // Leaves keep their adjoint so it can be collected below.
            if matches!(self.nodes[i].0, Op::Leaf { trainable: true, .. }) {
                adjoints[i] = Some(d);
            }
        }

        let mut grads = BTreeMap::new();
        for (name, id) in self.leaves.iter() {
            if let Op::Leaf { trainable: true, .. } = self.nodes[id.0].0 {
                let g = adjoints[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(&self.nodes[id.0].1));
                grads.insert(name.clone(), g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(
        &self,
        i: usize,
        d: &Tensor,
        trace: &EvalTrace,
        adjoints: &mut [Option<Tensor>],
    ) {
        let add_to = |adjoints: &mut [Option<Tensor>], target: NodeId, contrib: Tensor, g: &ExprGraph| {
            match &g.nodes[target.0].0 {
                // Gradients of frozen leaves and literals are not materialized.
                Op::Leaf { trainable: false, .. } | Op::Lit { .. } => return,
                _ => {}
            }
            match &mut adjoints[target.0] {
                Some(acc) => {
                    let data = acc.data_mut();
                    for (a, c) in data.iter_mut().zip(contrib.data()) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &self.nodes[i].0 {
            Op::Leaf { .. } | Op::Lit { .. } => {}
            Op::MatMul { lhs, rhs, transpose_rhs } => {
                let a = trace.value(*lhs);
                let b = trace.value(*rhs);
                let (da, db) = matmul_backward(a, b, *transpose_rhs, d);
                add_to(adjoints, *lhs, da, self);
                add_to(adjoints, *rhs, db, self);
            }
            Op::Add { lhs, rhs } => {
                let ls = self.shape(*lhs);
                let rs = self.shape(*rhs);
                add_to(adjoints, *lhs, reduce_to_shape(d, ls), self);
                add_to(adjoints, *rhs, reduce_to_shape(d, rs), self);
            }
            Op::Sub { lhs, rhs } => {
                let ls = self.shape(*lhs);
                let rs = self.shape(*rhs);
                add_to(adjoints, *lhs, reduce_to_shape(d, ls), self);
                let neg = map(d, |x| -x);
                add_to(adjoints, *rhs, reduce_to_shape(&neg, rs), self);
            }
            Op::Mul { lhs, rhs } => {
                let a = trace.value(*lhs);
                let b = trace.value(*rhs);
                let da_full = ew(d, b, |x, y| x * y);
                let db_full = ew(d, a, |x, y| x * y);
                add_to(adjoints, *lhs, reduce_to_shape(&da_full, self.shape(*lhs)), self);
                add_to(adjoints, *rhs, reduce_to_shape(&db_full, self.shape(*rhs)), self);
            }
            Op::Relu { input } => {
                let x = trace.value(*input);
                let g = zip_map(d, x, |dv, xv| if xv > 0.0 { dv } else { 0.0 });
                add_to(adjoints, *input, g, self);
            }
            Op::Square { input } => {
                let x = trace.value(*input);
                let g = zip_map(d, x, |dv, xv| 2.0 * xv * dv);
                add_to(adjoints, *input, g, self);
            }
            Op::Softmax { input } => {
                let y = &trace.values[i];
                add_to(adjoints, *input, softmax_backward(y, d), self);
            }
            Op::TopKSoftmax { input, k } => {
                let x = trace.value(*input);
                let y = &trace.values[i];
                add_to(adjoints, *input, topk_softmax_backward(x, y, d, *k), self);
            }
            Op::SmoothStep { input, gamma } => {
                let x = trace.value(*input);
                let g = trace.value(*gamma).item();
                let grad = zip_map(d, x, |dv, xv| dv * smooth_step_derivative(xv, g));
                add_to(adjoints, *input, grad, self);
                // No gradient flows into gamma: schedules own it.
            }
            Op::Log { input } => {
                let x = trace.value(*input);
                let g = zip_map(d, x, |dv, xv| dv / xv);
                add_to(adjoints, *input, g, self);
            }
            Op::Exp { input } => {
                let y = &trace.values[i];
                let g = zip_map(d, y, |dv, yv| dv * yv);
                add_to(adjoints, *input, g, self);
            }
            Op::XLogX { input } => {
                let x = trace.value(*input);
                let g = zip_map(d, x, |dv, xv| if xv == 0.0 { 0.0 } else { dv * (xv.ln() + 1.0) });
                add_to(adjoints, *input, g, self);
            }
            Op::Sum { input, reduce } => {
                let g = reduce_backward(d, self.shape(*input), *reduce, false);
                add_to(adjoints, *input, g, self);
            }
            Op::Mean { input, reduce } => {
                let g = reduce_backward(d, self.shape(*input), *reduce, true);
                add_to(adjoints, *input, g, self);
            }
            Op::Concat { parts, axis } => {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| self.shape(*p)).collect();
                let grads = concat_backward(d, &shapes, *axis);
                for (p, g) in parts.iter().zip(grads) {
                    add_to(adjoints, *p, g, self);
                }
            }
            Op::Slice { input, axis, start, stop } => {
                let g = slice_backward(d, self.shape(*input), *axis, *start, *stop);
                add_to(adjoints, *input, g, self);
            }
            Op::Reshape { input } => {
                let g = Tensor::new(self.shape(*input).to_vec(), d.data().to_vec())
                    .expect("reshape shapes validated");
                add_to(adjoints, *input, g, self);
            }
            Op::ScalarMul { input, scale } => {
                let g = map(d, |x| x * scale);
                add_to(adjoints, *input, g, self);
            }
        }
    }
}

/// The smooth-step value: a C^1 cubic that saturates to exactly 0 and 1.
pub(crate) fn smooth_step_value(t: f64, gamma: f64) -> f64 {
    let half = gamma / 2.0;
    if t <= -half {
        0.0
    } else if t >= half {
        1.0
    } else {
        -2.0 / (gamma * gamma * gamma) * t * t * t + 1.5 / gamma * t + 0.5
    }
}

/// Derivative of the smooth-step; exactly 0 outside the fractional region.
pub(crate) fn smooth_step_derivative(t: f64, gamma: f64) -> f64 {
    let half = gamma / 2.0;
    if t.abs() >= half {
        0.0
    } else {
        -6.0 / (gamma * gamma * gamma) * t * t + 1.5 / gamma
    }
}

fn xlogx_value(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

// --- elementwise / broadcasting machinery ----------------------------------

#[derive(Clone, Copy, PartialEq, Debug)]
enum BroadcastKind {
    Same,
    LhsScalar,
    RhsScalar,
    RhsRow,
    LhsRow,
    RhsCol,
    LhsCol,
}

fn broadcast_kind(ls: &[usize], rs: &[usize]) -> Option<(BroadcastKind, Vec<usize>)> {
    if ls == rs {
        return Some((BroadcastKind::Same, ls.to_vec()));
    }
    let ln: usize = ls.iter().product();
    let rn: usize = rs.iter().product();
    if rn == 1 {
        return Some((BroadcastKind::RhsScalar, ls.to_vec()));
    }
    if ln == 1 {
        return Some((BroadcastKind::LhsScalar, rs.to_vec()));
    }
    if ls.len() == 2 && rs.len() == 1 && rs[0] == ls[1] {
        return Some((BroadcastKind::RhsRow, ls.to_vec()));
    }
    if rs.len() == 2 && ls.len() == 1 && ls[0] == rs[1] {
        return Some((BroadcastKind::LhsRow, rs.to_vec()));
    }
    if ls.len() == 2 && rs.len() == 2 && rs[0] == ls[0] && rs[1] == 1 {
        return Some((BroadcastKind::RhsCol, ls.to_vec()));
    }
    if ls.len() == 2 && rs.len() == 2 && ls[0] == rs[0] && ls[1] == 1 {
        return Some((BroadcastKind::LhsCol, rs.to_vec()));
    }
    None
}

fn ew(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (kind, out_shape) =
        broadcast_kind(a.shape(), b.shape()).expect("broadcast validated at construction");
    let ad = a.data();
    let bd = b.data();
    let data: Vec<f64> = match kind {
        BroadcastKind::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        BroadcastKind::RhsScalar => ad.iter().map(|&x| f(x, bd[0])).collect(),
        BroadcastKind::LhsScalar => bd.iter().map(|&y| f(ad[0], y)).collect(),
        BroadcastKind::RhsRow => {
            let c = out_shape[1];
            let mut out = Vec::with_capacity(ad.len());
            for row in ad.chunks_exact(c) {
                out.extend(row.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        BroadcastKind::LhsRow => {
            let c = out_shape[1];
            let mut out = Vec::with_capacity(bd.len());
            for row in bd.chunks_exact(c) {
                out.extend(ad.iter().zip(row).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        BroadcastKind::RhsCol => {
            let c = out_shape[1];
            let mut out = Vec::with_capacity(ad.len());
            for (i, row) in ad.chunks_exact(c).enumerate() {
                out.extend(row.iter().map(|&x| f(x, bd[i])));
            }
            out
        }
        BroadcastKind::LhsCol => {
            let c = out_shape[1];
            let mut out = Vec::with_capacity(bd.len());
            for (i, row) in bd.chunks_exact(c).enumerate() {
                out.extend(row.iter().map(|&y| f(ad[i], y)));
            }
            out
        }
    };
    Tensor::new(out_shape, data).expect("broadcast shape consistent")
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        .expect("shape preserved")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shape preserved")
}

/// Sums a full-size tensor down to a broadcast operand's shape.
fn reduce_to_shape(d: &Tensor, target: &[usize]) -> Tensor {
    if d.shape() == target {
        return d.clone();
    }
    let tn: usize = target.iter().product();
    if tn == 1 {
        return Tensor::new(target.to_vec(), vec![d.data().iter().sum()]).expect("scalar");
    }
    let (r, c) = (d.shape()[0], d.shape()[1]);
    if target.len() == 1 {
        // Row-vector operand broadcast over rows: sum down the columns.
        let mut out = vec![0.0; c];
        for row in d.data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor::new(target.to_vec(), out).expect("row reduce")
    } else {
        // Column-vector operand [r, 1]: sum across each row.
        debug_assert_eq!(target, &[r, 1]);
        let out: Vec<f64> = d.data().chunks_exact(c).map(|row| row.iter().sum()).collect();
        Tensor::new(target.to_vec(), out).expect("col reduce")
    }
}

// --- matmul ------------------------------------------------------------------

fn matmul_out_shape(ls: &[usize], rs: &[usize], transpose_rhs: bool) -> Vec<usize> {
    let n = match (rs.len(), transpose_rhs) {
        (1, _) => None,
        (_, false) => Some(rs[1]),
        (_, true) => Some(rs[0]),
    };
    match (ls.len(), n) {
        (1, None) => vec![],
        (1, Some(n)) => vec![n],
        (_, None) => vec![ls[0]],
        (_, Some(n)) => vec![ls[0], n],
    }
}

/// `a (m x k) @ b (k x n)`.
fn mm_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m x k) @ b^T` where `b` is `n x k`.
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `a^T @ b` where `a` is `k x m` and `b` is `k x n`.
fn mm_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn promote(shape: &[usize], as_rhs: bool) -> (usize, usize) {
    match shape.len() {
        1 => {
            if as_rhs {
                (shape[0], 1)
            } else {
                (1, shape[0])
            }
        }
        _ => (shape[0], shape[1]),
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor, transpose_rhs: bool) -> Tensor {
    let (m, k) = promote(a.shape(), false);
    let data = if transpose_rhs {
        let (n, _) = (b.shape()[0], b.shape()[1]);
        mm_nt(a.data(), m, k, b.data(), n)
    } else {
        let (_, n) = promote(b.shape(), true);
        mm_nn(a.data(), m, k, b.data(), n)
    };
    let shape = matmul_out_shape(a.shape(), b.shape(), transpose_rhs);
    Tensor::new(shape, data).expect("matmul shape")
}

fn matmul_backward(a: &Tensor, b: &Tensor, transpose_rhs: bool, d: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = promote(a.shape(), false);
    let n = if transpose_rhs { b.shape()[0] } else { promote(b.shape(), true).1 };
    let dd = d.data();
    let (da, db) = if transpose_rhs {
        // y = a @ b^T; b is (n, k).
        let da = mm_nn(dd, m, n, b.data(), k);
        let db = mm_tn(dd, m, n, a.data(), k);
        (da, db)
    } else {
        // y = a @ b; b is (k, n).
        let da = mm_nt(dd, m, n, b.data(), k);
        let db = mm_tn(a.data(), m, k, dd, n);
        (da, db)
    };
    (
        Tensor::new(a.shape().to_vec(), da).expect("grad shape"),
        Tensor::new(b.shape().to_vec(), db).expect("grad shape"),
    )
}

// --- softmax family ----------------------------------------------------------

fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols().max(1);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(c) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax shape")
}

fn softmax_backward(y: &Tensor, d: &Tensor) -> Tensor {
    let c = y.cols().max(1);
    let mut out = Vec::with_capacity(y.numel());
    for (yrow, drow) in y.data().chunks_exact(c).zip(d.data().chunks_exact(c)) {
        let dot: f64 = yrow.iter().zip(drow).map(|(&yv, &dv)| yv * dv).sum();
        out.extend(yrow.iter().zip(drow).map(|(&yv, &dv)| yv * (dv - dot)));
    }
    Tensor::new(y.shape().to_vec(), out).expect("softmax grad shape")
}

/// Indices of the k largest entries; equal values favor the lower index.
pub(crate) fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn topk_softmax_rows(x: &Tensor, k: usize) -> Tensor {
    let c = x.cols().max(1);
    let mut out = vec![0.0; x.numel()];
    for (r, row) in x.data().chunks_exact(c).enumerate() {
        let keep = topk_indices(row, k);
        let mx = keep.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &i in &keep {
            let e = (row[i] - mx).exp();
            out[r * c + i] = e;
            z += e;
        }
        for &i in &keep {
            out[r * c + i] /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("topk softmax shape")
}

fn topk_softmax_backward(x: &Tensor, y: &Tensor, d: &Tensor, k: usize) -> Tensor {
    let c = x.cols().max(1);
    let mut out = vec![0.0; x.numel()];
    for (r, row) in x.data().chunks_exact(c).enumerate() {
        let keep = topk_indices(row, k);
        let base = r * c;
        let dot: f64 = keep.iter().map(|&i| y.data()[base + i] * d.data()[base + i]).sum();
        for &i in &keep {
            let yv = y.data()[base + i];
            out[base + i] = yv * (d.data()[base + i] - dot);
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("topk softmax grad shape")
}

// --- reductions / shape ops ----------------------------------------------------

fn reduce_forward(x: &Tensor, reduce: Reduce, mean: bool) -> Tensor {
    match reduce {
        Reduce::All => {
            let s: f64 = x.data().iter().sum();
            let v = if mean { s / x.numel() as f64 } else { s };
            Tensor::scalar(v)
        }
        Reduce::LastAxis => {
            if x.rank() <= 1 {
                let s: f64 = x.data().iter().sum();
                let v = if mean { s / x.numel() as f64 } else { s };
                Tensor::scalar(v)
            } else {
                let c = x.shape()[1];
                let out: Vec<f64> = x
                    .data()
                    .chunks_exact(c)
                    .map(|row| {
                        let s: f64 = row.iter().sum();
                        if mean {
                            s / c as f64
                        } else {
                            s
                        }
                    })
                    .collect();
                Tensor::vector(out)
            }
        }
    }
}

fn reduce_backward(d: &Tensor, in_shape: &[usize], reduce: Reduce, mean: bool) -> Tensor {
    let n: usize = in_shape.iter().product();
    match reduce {
        Reduce::All => {
            let scale = if mean { 1.0 / n as f64 } else { 1.0 };
            Tensor::new(in_shape.to_vec(), vec![d.item() * scale; n]).expect("reduce grad")
        }
        Reduce::LastAxis => {
            if in_shape.len() <= 1 {
                let scale = if mean { 1.0 / n as f64 } else { 1.0 };
                Tensor::new(in_shape.to_vec(), vec![d.item() * scale; n]).expect("reduce grad")
            } else {
                let c = in_shape[1];
                let scale = if mean { 1.0 / c as f64 } else { 1.0 };
                let mut out = Vec::with_capacity(n);
                for &dv in d.data() {
                    out.extend(std::iter::repeat(dv * scale).take(c));
                }
                Tensor::new(in_shape.to_vec(), out).expect("reduce grad")
            }
        }
    }
}

fn concat_forward(parts: &[&Tensor], axis: usize) -> Tensor {
    let rank = parts[0].rank();
    if rank == 1 || axis == 0 {
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Tensor::new(shape, data).expect("concat shape")
    } else {
        let rows = parts[0].shape()[0];
        let total_c: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(rows * total_c);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor::new(vec![rows, total_c], data).expect("concat shape")
    }
}

fn concat_backward(d: &Tensor, shapes: &[&[usize]], axis: usize) -> Vec<Tensor> {
    let rank = shapes[0].len();
    if rank == 1 || axis == 0 {
        let mut out = Vec::with_capacity(shapes.len());
        let mut at = 0;
        for s in shapes {
            let n: usize = s.iter().product();
            out.push(Tensor::new(s.to_vec(), d.data()[at..at + n].to_vec()).expect("split"));
            at += n;
        }
        out
    } else {
        let rows = shapes[0][0];
        let mut out: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
        let mut at = 0;
        for _r in 0..rows {
            for (p, s) in shapes.iter().enumerate() {
                let c = s[1];
                out[p].extend_from_slice(&d.data()[at..at + c]);
                at += c;
            }
        }
        shapes
            .iter()
            .zip(out)
            .map(|(s, v)| Tensor::new(s.to_vec(), v).expect("split"))
            .collect()
    }
}

fn slice_forward(x: &Tensor, axis: usize, start: usize, stop: usize) -> Tensor {
    if x.rank() == 1 || axis == 0 {
        let row_len: usize = if x.rank() == 2 { x.shape()[1] } else { 1 };
        let mut shape = x.shape().to_vec();
        shape[0] = stop - start;
        let data = x.data()[start * row_len..stop * row_len].to_vec();
        Tensor::new(shape, data).expect("slice shape")
    } else {
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let w = stop - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&x.data()[i * c + start..i * c + stop]);
        }
        Tensor::new(vec![r, w], data).expect("slice shape")
    }
}

fn slice_backward(d: &Tensor, in_shape: &[usize], axis: usize, start: usize, stop: usize) -> Tensor {
    let mut out = Tensor::zeros(in_shape);
    if in_shape.len() == 1 || axis == 0 {
        let row_len: usize = if in_shape.len() == 2 { in_shape[1] } else { 1 };
        out.data_mut()[start * row_len..stop * row_len].copy_from_slice(d.data());
    } else {
        let c = in_shape[1];
        let w = stop - start;
        for i in 0..in_shape[0] {
            out.data_mut()[i * c + start..i * c + stop]
                .copy_from_slice(&d.data()[i * w..(i + 1) * w]);
        }
    }
    out
}

/// Central finite-difference gradient of a scalar function: the independent
/// oracle used to validate the reverse-mode rules.
pub fn numeric_gradient<F>(mut f: F, point: &[f64], eps: f64) -> Result<Vec<f64>, GraphError>
where
    F: FnMut(&[f64]) -> f64,
{
    if eps <= 0.0 {
        return Err(GraphError::InvalidOp { detail: "numeric_gradient eps must be positive".into() });
    }
    let mut p = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x = p[i];
        p[i] = x + eps;
        let f_plus = f(&p);
        p[i] = x - eps;
        let f_minus = f(&p);
        p[i] = x;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(GraphError::NonFinite {
                context: format!("numeric_gradient at component {}", i),
            });
        }
        grad.push((f_plus - f_minus) / (2.0 * eps));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval1(g: &ExprGraph, b: &Bindings<'_>, id: NodeId) -> Vec<f64> {
        g.evaluate(b).unwrap().value(id).data().to_vec()
    }

    #[test]
    fn relu_and_softmax_basics() {
        let mut g = ExprGraph::new();
        let x = g.lit(Tensor::vector(vec![-2.0]));
        let r = g.relu(x).unwrap();
        let y = g.lit(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(y).unwrap();
        let b = Bindings::new();
        assert_eq!(eval1(&g, &b, r), vec![0.0]);
        assert_eq!(eval1(&g, &b, s), vec![0.5, 0.5]);
    }

    #[test]
    fn matmul_identity_case() {
        let mut g = ExprGraph::new();
        let eye = g.lit(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = g.lit(Tensor::vector(vec![3.5, -1.25]));
        // identity @ v = v; computed as (2x2) @ (2,) -> (2,)
        let vm = g.matmul(eye, v).unwrap();
        let b = Bindings::new();
        assert_eq!(eval1(&g, &b, vm), vec![3.5, -1.25]);
    }

    #[test]
    fn square_gradient_matches_analytic() {
        let mut g = ExprGraph::new();
        let x = g.leaf("x", &[], true).unwrap();
        let loss = g.square(x).unwrap();
        let t = Tensor::scalar(3.0);
        let mut b = Bindings::new();
        b.insert("x", &t);
        let grads = g.gradient(loss, &b).unwrap();
        assert_eq!(grads["x"].item(), 6.0);
    }

    #[test]
    fn smooth_step_gradient_at_midpoint_and_saturation() {
        let mut g = ExprGraph::new();
        let t = g.leaf("t", &[], true).unwrap();
        let gamma = g.scalar(1.0);
        let s = g.smooth_step(t, gamma).unwrap();
        for (point, expected) in [(0.5, 0.0), (0.0, 1.5), (-0.5, 0.0)] {
            let tv = Tensor::scalar(point);
            let mut b = Bindings::new();
            b.insert("t", &tv);
            let grads = g.gradient(s, &b).unwrap();
            assert_eq!(grads["t"].item(), expected, "at t={}", point);
        }
    }

    #[test]
    fn missing_binding_and_bad_shape_are_structured_errors() {
        let mut g = ExprGraph::new();
        let x = g.leaf("x", &[2], true).unwrap();
        let s = g.sum_all(x).unwrap();
        let b = Bindings::new();
        match g.evaluate(&b) {
            Err(GraphError::MissingBinding { name }) => assert_eq!(name, "x"),
            other => panic!("expected missing binding, got {:?}", other.map(|_| ())),
        }
        let wrong = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut b = Bindings::new();
        b.insert("x", &wrong);
        assert!(matches!(g.evaluate(&b), Err(GraphError::BindingShape { .. })));
        let tv = Tensor::vector(vec![1.0, 2.0]);
        let mut b = Bindings::new();
        b.insert("x", &tv);
        assert!(g.evaluate(&b).is_ok());
        // Non-scalar loss is rejected.
        assert!(matches!(g.gradient(x, &b), Err(GraphError::NonScalarLoss { .. })));
        let _ = s;
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = ExprGraph::new();
        let a = g.lit(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.lit(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        match err {
            GraphError::ShapeMismatch { node, .. } => assert!(node.contains("matmul")),
            other => panic!("unexpected error {:?}", other),
        }
    }

    #[test]
    fn evaluate_is_referentially_transparent() {
        let mut g = ExprGraph::new();
        let x = g.leaf("x", &[3], false).unwrap();
        let sm = g.softmax(x).unwrap();
        let e = g.exp(sm).unwrap();
        let s = g.sum_all(e).unwrap();
        let xv = Tensor::vector(vec![0.3, -1.7, 2.9]);
        let mut b = Bindings::new();
        b.insert("x", &xv);
        let v1 = eval1(&g, &b, s);
        let v2 = eval1(&g, &b, s);
        assert_eq!(v1[0].to_bits(), v2[0].to_bits());
    }

    #[test]
    fn frozen_leaves_get_no_gradient_entry() {
        let mut g = ExprGraph::new();
        let x = g.leaf("x", &[], true).unwrap();
        let c = g.leaf("c", &[], false).unwrap();
        let p = g.mul(x, c).unwrap();
        let loss = g.square(p).unwrap();
        let xv = Tensor::scalar(2.0);
        let cv = Tensor::scalar(5.0);
        let mut b = Bindings::new();
        b.insert("x", &xv);
        b.insert("c", &cv);
        let grads = g.gradient(loss, &b).unwrap();
        assert!(grads.contains_key("x"));
        assert!(!grads.contains_key("c"));
    }

    #[test]
    fn unreached_trainable_leaf_gets_zero_gradient() {
        let mut g = ExprGraph::new();
        let x = g.leaf("x", &[], true).unwrap();
        let unused = g.leaf("unused", &[2], true).unwrap();
        let loss = g.square(x).unwrap();
        let xv = Tensor::scalar(1.0);
        let uv = Tensor::vector(vec![9.0, 9.0]);
        let mut b = Bindings::new();
        b.insert("x", &xv);
        b.insert("unused", &uv);
        let grads = g.gradient(loss, &b).unwrap();
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
        let _ = unused;
    }

    #[test]
    fn numeric_gradient_oracle() {
        // f = x^2 at 3 -> 6
        let g = numeric_gradient(|p| p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        // constant -> zeros
        let g = numeric_gradient(|_| 7.0, &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        // non-finite propagates as error
        assert!(numeric_gradient(|p| (p[0]).ln(), &[0.0], 1e-5).is_err());
        // eps must be positive
        assert!(numeric_gradient(|p| p[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn smooth_step_forward_and_reverse_continuous_at_boundaries() {
        let gamma = 1.0;
        for sign in [-1.0, 1.0] {
            let b = sign * gamma / 2.0;
            let below = smooth_step_value(b - 1e-9, gamma);
            let at = smooth_step_value(b, gamma);
            let above = smooth_step_value(b + 1e-9, gamma);
            assert!((below - at).abs() < 1e-8);
            assert!((above - at).abs() < 1e-8);
            let dbelow = smooth_step_derivative(b - 1e-9, gamma);
            let dat = smooth_step_derivative(b, gamma);
            let dabove = smooth_step_derivative(b + 1e-9, gamma);
            assert_eq!(dat, 0.0);
            assert!(dbelow.abs() < 1e-7);
            assert!(dabove.abs() < 1e-7);
        }
        // Exact saturation outside the fractional region.
        assert_eq!(smooth_step_value(0.5, gamma), 1.0);
        assert_eq!(smooth_step_value(-0.5, gamma), 0.0);
        assert_eq!(smooth_step_value(7.0, gamma), 1.0);
    }

    #[test]
    fn topk_softmax_mask_is_exact() {
        let mut g = ExprGraph::new();
        let x = g.leaf("x", &[4], true).unwrap();
        let y = g.topk_softmax(x, 2).unwrap();
        let s1 = g.slice(y, 0, 2, 3).unwrap();
        let loss = g.sum_all(s1).unwrap();
        let xv = Tensor::vector(vec![0.0, 0.0, 5.0, 5.0]);
        let mut b = Bindings::new();
        b.insert("x", &xv);
        let out = eval1(&g, &b, y);
        assert_eq!(out, vec![0.0, 0.0, 0.5, 0.5]);
        // Gradient w.r.t. masked entries is exactly zero.
        let grads = g.gradient(loss, &b).unwrap();
        assert_eq!(grads["x"].data()[0], 0.0);
        assert_eq!(grads["x"].data()[1], 0.0);
    }

    #[test]
    fn xlogx_exact_zero_and_gradient_convention() {
        let mut g = ExprGraph::new();
        let x = g.leaf("x", &[3], true).unwrap();
        let y = g.xlogx(x).unwrap();
        let loss = g.sum_all(y).unwrap();
        let xv = Tensor::vector(vec![0.0, 1.0, 0.5]);
        let mut b = Bindings::new();
        b.insert("x", &xv);
        let out = eval1(&g, &b, y);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 0.0);
        assert!((out[2] - 0.5 * 0.5f64.ln()).abs() < 1e-15);
        let grads = g.gradient(loss, &b).unwrap();
        assert_eq!(grads["x"].data()[0], 0.0); // convention at x = 0
        assert!((grads["x"].data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_and_bce_are_stable_at_extremes() {
        let mut g = ExprGraph::new();
        let x = g.leaf("x", &[3], true).unwrap();
        let s = g.sigmoid(x).unwrap();
        let y = g.lit(Tensor::vector(vec![1.0, 0.0, 1.0]));
        let loss = g.bce_with_logits(x, y).unwrap();
        let xv = Tensor::vector(vec![800.0, -800.0, 0.0]);
        let mut b = Bindings::new();
        b.insert("x", &xv);
        let sv = eval1(&g, &b, s);
        assert_eq!(sv[0], 1.0);
        assert_eq!(sv[1], 0.0);
        assert!((sv[2] - 0.5).abs() < 1e-15);
        let trace = g.evaluate(&b).unwrap();
        assert!(trace.value(loss).item().is_finite());
        let grads = g.gradient(loss, &b).unwrap();
        assert!(grads["x"].is_finite());
    }
}
