//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every [`Primitive`] application whose inputs track
//! gradients. Leaves (parameters, or inputs under test) are ordinary
//! [`Tensor`]s created with `requires_grad`; the first time a leaf is used on
//! a tape it gets a leaf node there, so one parameter set can feed any number
//! of independent tapes (one per utterance, possibly on different threads).
//!
//! [`Tape::backward`] walks the recorded nodes once in reverse and returns a
//! [`Gradients`] map keyed by leaf [`TensorId`].

mod gemm;
pub mod gradcheck;
mod ops;

pub use gemm::{dot, gemm_nn, gemm_nt, gemm_tn};
pub use gradcheck::{central_difference, finite_diff_check, finite_diff_check_sampled};
pub(crate) use ops::channel_stats;

use std::collections::HashMap;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::{Error, Real, Result};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);
static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_tensor_id() -> TensorId {
    TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
}

/// Process-unique identity of a tensor value; gradients are keyed by it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

/// Handle of a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// An n-dimensional array with shared, copy-on-write storage.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<Real>>,
    requires_grad: bool,
    id: TensorId,
    node: Option<NodeId>,
}

impl Tensor {
    /// Builds a leaf tensor. `shape` may be empty for a scalar.
    pub fn new(shape: &[usize], data: Vec<Real>, requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad,
            id: fresh_tensor_id(),
            node: None,
        })
    }

    pub fn constant(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        Self::new(shape, data, false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n], false).expect("zeros: consistent shape")
    }

    pub fn scalar(value: Real) -> Self {
        Self::new(&[], vec![value], false).expect("scalar shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<Real> {
        self.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_leaf(&self) -> bool {
        self.node.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<Real> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    /// Same values, cut from any graph and not tracking gradients.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            id: fresh_tensor_id(),
            node: None,
        }
    }

    /// Same leaf identity with a different gradient flag.
    pub fn with_requires_grad(mut self, requires_grad: bool) -> Tensor {
        debug_assert!(self.node.is_none(), "only leaves can change their flag");
        self.requires_grad = requires_grad;
        self
    }

    /// Mutable view of a leaf's values. Other holders of the old storage
    /// (e.g. nodes on a finished tape) keep their copy.
    pub fn data_mut(&mut self) -> &mut [Real] {
        debug_assert!(self.node.is_none(), "only leaves are mutated in place");
        Arc::make_mut(&mut self.data).as_mut_slice()
    }
}

/// Primitive operations with a forward rule and an exact vector-Jacobian
/// product. Shapes are checked by [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Elementwise `a + b`, identical shapes.
    Add,
    /// Elementwise `a * b`, identical shapes.
    Mul,
    /// `a[m×k] · b[k×n]`.
    MatMul,
    /// `x[N×C×H×W] ⋆ w[O×C×KH×KW] (+ b[O])`, zero padding.
    Conv2d {
        stride: (usize, usize),
        pad: (usize, usize),
    },
    /// Max over windows of `x[N×C×H×W]`; padding never wins, ties go to the
    /// lowest flat index.
    MaxPool2d {
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    },
    Relu,
    Sigmoid,
    Tanh,
    LogSoftmax {
        axis: usize,
    },
    /// Mean over one axis (removed), or over everything when `None`.
    Mean {
        axis: Option<usize>,
    },
    /// Sum over one axis (removed), or over everything when `None`.
    Sum {
        axis: Option<usize>,
    },
    Concat {
        axis: usize,
    },
    /// One half-open range per axis.
    Slice {
        ranges: Vec<Range<usize>>,
    },
    /// `x[N×C×…] * scale[C] + shift[C]`.
    AffineChannel,
    /// Inverted dropout: `x * mask / (1 − rate)` with an external 0/1 mask.
    Dropout {
        rate: Real,
    },
    /// Elementwise `mul * x + add`.
    Affine {
        mul: Real,
        add: Real,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// Matrix transpose of a rank-2 tensor.
    Transpose,
    /// `x[…×n] + b[n]` broadcast over leading axes.
    AddBias,
    /// Per-channel standardization of `x[N×C×…]` over every axis except C.
    ChannelNorm {
        eps: Real,
    },
    /// CTC negative log-likelihood of a `T×(V+1)` log-probability lattice.
    CtcLoss {
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Input {
    slot: Option<usize>,
    value: Tensor,
}

#[derive(Debug)]
enum NodeOp {
    Leaf(TensorId),
    Prim(Primitive),
}

#[derive(Debug)]
struct Node {
    op: NodeOp,
    inputs: Vec<Input>,
    shape: Vec<usize>,
    out: Arc<Vec<Real>>,
    saved: ops::Saved,
}

/// Record of primitive applications in topological order.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    leaf_slots: HashMap<TensorId, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_slots: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Kind and input node indices of node `index`; `None` kind for leaves.
    pub fn node_info(&self, index: usize) -> Option<(Option<&Primitive>, Vec<Option<usize>>)> {
        self.nodes.get(index).map(|n| {
            let kind = match &n.op {
                NodeOp::Leaf(_) => None,
                NodeOp::Prim(p) => Some(p),
            };
            (kind, n.inputs.iter().map(|i| i.slot).collect())
        })
    }

    fn slot_for(&mut self, t: &Tensor) -> Result<Option<usize>> {
        if !t.requires_grad {
            return Ok(None);
        }
        match t.node {
            Some(node) if node.tape == self.id => Ok(Some(node.index)),
            Some(_) => Err(Error::ForeignTensor),
            None => {
                if let Some(&slot) = self.leaf_slots.get(&t.id) {
                    return Ok(Some(slot));
                }
                let slot = self.nodes.len();
                self.nodes.push(Node {
                    op: NodeOp::Leaf(t.id),
                    inputs: Vec::new(),
                    shape: t.shape.clone(),
                    out: Arc::clone(&t.data),
                    saved: ops::Saved::None,
                });
                self.leaf_slots.insert(t.id, slot);
                Ok(Some(slot))
            }
        }
    }

    /// Runs `prim` forward. The application is recorded only when some input
    /// tracks gradients; otherwise the result is a constant.
    pub fn apply(&mut self, prim: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        let out = ops::forward(&prim, inputs)?;
        let tracked = inputs.iter().any(|t| t.requires_grad);
        if !tracked {
            return Tensor::new(&out.shape, out.data, false);
        }
        let mut recorded = Vec::with_capacity(inputs.len());
        for t in inputs {
            let slot = self.slot_for(t)?;
            recorded.push(Input {
                slot,
                value: (*t).clone(),
            });
        }
        let data = Arc::new(out.data);
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: NodeOp::Prim(prim),
            inputs: recorded,
            shape: out.shape.clone(),
            out: Arc::clone(&data),
            saved: out.saved,
        });
        Ok(Tensor {
            shape: out.shape,
            data,
            requires_grad: true,
            id: fresh_tensor_id(),
            node: Some(NodeId {
                tape: self.id,
                index,
            }),
        })
    }

    /// Gradients of a scalar `loss` with respect to every tracked leaf that
    /// contributed to it.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::NotScalar(loss.shape.clone()));
        }
        let mut result = Gradients::default();
        let Some(root) = loss.node else {
            if loss.requires_grad {
                // A leaf loss: d loss / d loss = 1.
                result.insert(loss.id, Tensor::new(&loss.shape, vec![1.0], false)?);
            }
            return Ok(result);
        };
        if root.tape != self.id {
            return Err(Error::ForeignTensor);
        }
        let mut grads: Vec<Option<Vec<Real>>> = Vec::with_capacity(root.index + 1);
        grads.resize_with(root.index + 1, || None);
        grads[root.index] = Some(vec![1.0]);

        for index in (0..=root.index).rev() {
            let Some(gout) = grads[index].take() else {
                continue;
            };
            let node = &self.nodes[index];
            match &node.op {
                NodeOp::Leaf(id) => {
                    result.insert(*id, Tensor::new(&node.shape, gout, false)?);
                }
                NodeOp::Prim(prim) => {
                    let values: Vec<&Tensor> = node.inputs.iter().map(|i| &i.value).collect();
                    for (which, input) in node.inputs.iter().enumerate() {
                        let Some(slot) = input.slot else { continue };
                        let gin = grads[slot]
                            .get_or_insert_with(|| vec![0.0; input.value.numel()]);
                        ops::vjp(
                            prim,
                            &values,
                            &node.out,
                            &node.shape,
                            &node.saved,
                            &gout,
                            which,
                            gin,
                        );
                    }
                }
            }
        }
        Ok(result)
    }

    // Convenience wrappers.

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Relu, &[x])
    }
    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Sigmoid, &[x])
    }
    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Tanh, &[x])
    }
    pub fn log_softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.apply(Primitive::LogSoftmax { axis }, &[x])
    }
    pub fn mean(&mut self, x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.apply(Primitive::Mean { axis }, &[x])
    }
    pub fn sum(&mut self, x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.apply(Primitive::Sum { axis }, &[x])
    }
    pub fn concat(&mut self, xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        self.apply(Primitive::Concat { axis }, xs)
    }
    pub fn slice(&mut self, x: &Tensor, ranges: Vec<Range<usize>>) -> Result<Tensor> {
        self.apply(Primitive::Slice { ranges }, &[x])
    }
    /// Columns `cols` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: &Tensor, cols: Range<usize>) -> Result<Tensor> {
        let rows = x.shape().first().copied().unwrap_or(0);
        self.slice(x, vec![0..rows, cols])
    }
    /// Row `row` of a rank-2 tensor, kept as `1×n`.
    pub fn row(&mut self, x: &Tensor, row: usize) -> Result<Tensor> {
        let cols = x.shape().get(1).copied().unwrap_or(0);
        self.slice(x, vec![row..row + 1, 0..cols])
    }
    pub fn affine(&mut self, x: &Tensor, mul: Real, add: Real) -> Result<Tensor> {
        self.apply(Primitive::Affine { mul, add }, &[x])
    }
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }
    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Transpose, &[x])
    }
    pub fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::AddBias, &[x, b])
    }
}

/// Gradients of one backward pass, keyed by leaf identity.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<TensorId, Tensor>,
}

impl Gradients {
    fn insert(&mut self, id: TensorId, grad: Tensor) {
        self.map.insert(id, grad);
    }

    /// Gradient for `leaf`; zeros when it did not participate.
    pub fn get(&self, leaf: &Tensor) -> Tensor {
        self.map
            .get(&leaf.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&leaf.shape))
    }

    pub fn get_id(&self, id: TensorId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn contains(&self, leaf: &Tensor) -> bool {
        self.map.contains_key(&leaf.id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.map.keys().copied()
    }

    /// Elementwise accumulation of another pass's gradients.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.map {
            match self.map.get_mut(id) {
                Some(mine) => {
                    for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(*id, g.detach());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: Real) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

#[cfg(test)]
mod tests;
