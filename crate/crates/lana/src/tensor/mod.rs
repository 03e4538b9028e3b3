//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The substrate is a *tape*: every operation eagerly computes its value and
//! records a node describing how it was produced. [`Tape::backward`] walks the
//! nodes in reverse creation order and accumulates adjoints into the leaves.
//! Tapes are cheap, single-threaded, and meant to be rebuilt per step; tensors
//! are small handles into their tape.

mod backward;
mod check;
pub(crate) mod ops;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
pub use check::{finite_diff_check, finite_diff_spot_check};
use ops::Op;

// ── values ──────────────────────────────────────────────────────────────────

/// A dense row-major array of `f64` with an explicit shape.
///
/// Scalars are represented as shape `[1]`. The empty shape is rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    /// Builds an array, checking that `data.len()` matches the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("invalid shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    /// All-zero array of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    /// Array of the given shape with every element set to `v`.
    pub fn filled(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![v; numel] }
    }

    /// Shape-`[1]` scalar.
    pub fn scalar(v: f64) -> Self {
        Array { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Element at a full multi-index (test helper; panics on bad index).
    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0usize;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }
}

// ── tape ────────────────────────────────────────────────────────────────────

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Array,
    pub(crate) requires_grad: bool,
    /// Filled by `backward` for leaves only; accumulates across calls.
    pub(crate) grad: Option<Vec<f64>>,
}

pub(crate) struct TapeInner {
    pub(crate) nodes: Vec<Node>,
}

/// An arena of recorded operations. Clones share the same arena.
#[derive(Clone)]
pub struct Tape(Rc<RefCell<TapeInner>>);

/// A handle to one node on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape(Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })))
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input node. Gradients are accumulated into it during
    /// `backward` iff `requires_grad` is set.
    pub fn leaf(&self, value: Array, requires_grad: bool) -> Tensor {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Records a constant input (never receives gradients).
    pub fn constant(&self, value: Array) -> Tensor {
        self.leaf(value, false)
    }

    pub(crate) fn push(&self, op: Op, value: Array, requires_grad: bool) -> Tensor {
        let mut inner = self.0.borrow_mut();
        inner.nodes.push(Node { op, value, requires_grad, grad: None });
        Tensor { tape: self.clone(), id: inner.nodes.len() - 1 }
    }

    pub(crate) fn with_inner<R>(&self, f: impl FnOnce(&TapeInner) -> R) -> R {
        f(&self.0.borrow())
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Concatenates tensors along their last axis.
    pub fn concat_last(&self, parts: &[&Tensor]) -> Result<Tensor> {
        for p in parts {
            if !self.same_tape(&p.tape) {
                return Err(Error::contract("concat inputs live on different tapes"));
            }
        }
        ops::concat_last(self, parts)
    }

    /// Looks rows of `table` (`[vocab, width]`) up by index, producing
    /// `[ids.len(), width]`. Indices at or past `vocab` are rejected.
    pub fn embedding(&self, table: &Tensor, ids: Arc<Vec<usize>>) -> Result<Tensor> {
        if !self.same_tape(&table.tape) {
            return Err(Error::contract("embedding table lives on a different tape"));
        }
        ops::embedding(self, table, ids)
    }

    /// Runs reverse-mode accumulation from a scalar `loss` down to the leaves.
    ///
    /// Fails if `loss` is not a single-element tensor, does not depend on any
    /// gradient-requiring leaf, or lives on a different tape. Leaf gradients
    /// add across repeated calls on the same tape.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !self.same_tape(&loss.tape) {
            return Err(Error::contract("loss lives on a different tape"));
        }
        let mut inner = self.0.borrow_mut();
        let nodes = &mut inner.nodes;
        let root = loss.id;
        if nodes[root].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[root].value.shape()
            )));
        }
        if !nodes[root].requires_grad {
            return Err(Error::contract(
                "loss does not depend on any tensor that requires gradients",
            ));
        }
        // Transient adjoints, indexed by node id. Entries are dropped as soon
        // as they have been pushed upstream, so peak memory stays close to the
        // widest layer of the graph rather than the whole tape.
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        adj[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(g) = adj[id].take() else { continue };
            if matches!(nodes[id].op, Op::Leaf) {
                let slot = nodes[id].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, gv) in slot.iter_mut().zip(&g) {
                    *s += gv;
                }
                continue;
            }
            backward::propagate(nodes, id, &g, &mut adj);
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

// ── tensor handle ───────────────────────────────────────────────────────────

macro_rules! binop {
    ($name:ident, $builder:ident, $doc:literal) => {
        #[doc = $doc]
        pub fn $name(&self, other: &Tensor) -> Result<Tensor> {
            self.check_tape(other)?;
            ops::$builder(&self.tape, self, other)
        }
    };
}

impl Tensor {
    fn check_tape(&self, other: &Tensor) -> Result<()> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::contract("operands live on different tapes"));
        }
        Ok(())
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_inner(|t| t.nodes[self.id].value.shape().to_vec())
    }

    /// Copy of the node's value.
    pub fn value(&self) -> Array {
        self.tape.with_inner(|t| t.nodes[self.id].value.clone())
    }

    /// Copy of the node's flat data.
    pub fn data(&self) -> Vec<f64> {
        self.tape.with_inner(|t| t.nodes[self.id].value.data().to_vec())
    }

    /// Borrows the node's value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&Array) -> R) -> R {
        self.tape.with_inner(|t| f(&t.nodes[self.id].value))
    }

    /// The element of a single-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        self.tape.with_inner(|t| {
            let v = &t.nodes[self.id].value;
            if v.numel() != 1 {
                return Err(Error::contract(format!(
                    "expected a scalar, got shape {:?}",
                    v.shape()
                )));
            }
            Ok(v.data()[0])
        })
    }

    /// Accumulated gradient (leaves only, after `backward`).
    pub fn grad(&self) -> Option<Array> {
        self.tape.with_inner(|t| {
            let node = &t.nodes[self.id];
            node.grad.as_ref().map(|g| Array {
                shape: node.value.shape().to_vec(),
                data: g.clone(),
            })
        })
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_inner(|t| t.nodes[self.id].requires_grad)
    }

    binop!(matmul, matmul, "Matrix product `[m,k] x [k,n] -> [m,n]`.");
    binop!(bmm, bmm, "Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.");
    binop!(add, add, "Elementwise sum of same-shape tensors.");
    binop!(sub, sub, "Elementwise difference of same-shape tensors.");
    binop!(mul, mul, "Elementwise (Hadamard) product of same-shape tensors.");
    binop!(add_bias, add_bias, "Adds a vector over the last axis: `b.shape == [shape.last()]`.");
    binop!(add_rows, add_rows, "Adds `b` to every leading slice: `b.shape == shape[1..]`.");
    binop!(add_scalar_t, add_scalar_t, "Adds a `[1]` tensor to every element.");

    /// Multiplies every element by a compile-time-known constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        ops::scale(&self.tape, self, c)
    }

    /// Adds a constant to every element.
    pub fn add_const(&self, c: f64) -> Result<Tensor> {
        ops::add_const(&self.tape, self, c)
    }

    /// Elementwise `exp`; inputs above ~709.78 are rejected as overflow.
    pub fn exp(&self) -> Result<Tensor> {
        ops::exp(&self.tape, self)
    }

    /// Elementwise natural log; non-positive inputs are rejected.
    pub fn ln(&self) -> Result<Tensor> {
        ops::ln(&self.tape, self)
    }

    /// Elementwise logistic sigmoid, computed tail-stably.
    pub fn sigmoid(&self) -> Result<Tensor> {
        ops::sigmoid(&self.tape, self)
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&self) -> Result<Tensor> {
        ops::relu(&self.tape, self)
    }

    /// Elementwise `ln(1 + exp(x))`, computed overflow-stably.
    pub fn softplus(&self) -> Result<Tensor> {
        ops::softplus(&self.tape, self)
    }

    /// Elementwise clamp into `[lo, hi]`; gradient is zero where clamped.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        ops::clamp(&self.tape, self, lo, hi)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor> {
        ops::softmax_last(&self.tape, self, None)
    }

    /// Softmax over the last axis of a `[G,Q,K]` tensor with an additive mask.
    ///
    /// `mask` has shape `[B,Q,K]` with `G` a multiple of `B` (consecutive
    /// groups share a mask slice); entries are `0` for allowed positions and
    /// `-1e9` for excluded ones. Excluded positions come out exactly `0.0`.
    /// Rows with every position excluded degrade to a uniform distribution;
    /// callers that care must reject such rows themselves.
    pub fn softmax_masked(&self, mask: &Arc<Array>) -> Result<Tensor> {
        ops::softmax_last(&self.tape, self, Some(mask.clone()))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        ops::slice(&self.tape, self, axis, start, len)
    }

    /// Reinterprets the data with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        ops::reshape(&self.tape, self, shape)
    }

    /// Permutes axes; `perm` must be a permutation of `0..rank`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        ops::permute(&self.tape, self, perm)
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        ops::sum_axis(&self.tape, self, axis)
    }

    /// Mean over one axis.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let dim = {
            let shape = self.shape();
            if axis >= shape.len() {
                return Err(Error::contract(format!(
                    "axis {axis} out of range for rank {}",
                    shape.len()
                )));
            }
            shape[axis]
        };
        self.sum_axis(axis)?.scale(1.0 / dim as f64)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        ops::sum_all(&self.tape, self)
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.tape.with_inner(|t| t.nodes[self.id].value.numel());
        self.sum_all()?.scale(1.0 / n as f64)
    }

    /// Layer normalization over the last axis with learned `gamma`/`beta`
    /// (both shaped `[shape.last()]`), using population variance plus `eps`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        self.check_tape(gamma)?;
        self.check_tape(beta)?;
        ops::layer_norm(&self.tape, self, gamma, beta, eps)
    }

    /// Contracts a `[Dy,Dx,Dp]` weight with per-row pivots `[N,Dp]` into
    /// per-row matrices `[N,Dy,Dx]`. `self` is the weight.
    pub fn contract3(&self, pivots: &Tensor) -> Result<Tensor> {
        self.check_tape(pivots)?;
        ops::contract3(&self.tape, self, pivots)
    }

    /// Applies per-row matrices `[N,Dy,Dx]` to per-row vectors `[N,Dx]`,
    /// producing `[N,Dy]`. `self` is the matrix stack.
    pub fn batch_matvec(&self, x: &Tensor) -> Result<Tensor> {
        self.check_tape(x)?;
        ops::batch_matvec(&self.tape, self, x)
    }

    /// Fused pivot application: for each row `n`,
    /// `out[n] = (sum_k w[:,:,k] * p[n,k]) x[n] + b`.
    ///
    /// Equivalent to `w.contract3(p).batch_matvec(x)` plus bias, but never
    /// materializes the `[N,Dy,Dx]` stack (it is recomputed in the backward
    /// pass instead).
    pub fn pivot_apply(&self, bias: &Tensor, x: &Tensor, pivots: &Tensor) -> Result<Tensor> {
        self.check_tape(bias)?;
        self.check_tape(x)?;
        self.check_tape(pivots)?;
        ops::pivot_apply(&self.tape, self, bias, x, pivots)
    }

    /// Decay penalties: `out[g,q,k] = -min(rho[g,q] * dis[b,q,k], cap)` with
    /// `b = g / (G / B)`. `self` is `rho`, `[G,Q]`; `dis` is a constant
    /// `[B,Q,K]` of non-negative distances; result is `[G,Q,K]`.
    pub fn decay_logits(&self, dis: &Arc<Array>, cap: f64) -> Result<Tensor> {
        ops::decay_logits(&self.tape, self, dis, cap)
    }
}
