//! Dense f64 tensors with reverse-mode gradient accumulation.
//!
//! Values are row-major `Vec<f64>`. Every op records a backward closure on
//! the output node when any input requires gradients; `backward()` replays
//! the recorded graph in reverse creation order. The graph is rebuilt on
//! every forward pass and dropped with the tensors that own it.
//!
//! Single-threaded by design: nodes are `Rc` and gradient buffers use
//! `RefCell`. Finiteness is checked at step boundaries by callers (see
//! [`Tensor::check_finite`]), not inside every kernel.

pub mod ops;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static TAPE_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with gradient recording disabled. Forward values are unchanged;
/// only the backward closures are skipped, so inference costs no graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = TAPE_ENABLED.with(|c| c.replace(false));
    let out = f();
    TAPE_ENABLED.with(|c| c.set(prev));
    out
}

pub(crate) fn tape_enabled() -> bool {
    TAPE_ENABLED.with(|c| c.get())
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    /// Receives d(loss)/d(self) and accumulates into the parents' grads.
    backward_fn: Option<BackwardFn>,
}

/// A dense N-dimensional array of f64 with an optional gradient slot.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Constant tensor: no gradient tracking.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Self::build(data, shape.to_vec(), false, Vec::new(), None)
    }

    /// Leaf tensor that accumulates gradients (parameter storage).
    pub fn with_grad(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Self::build(data, shape.to_vec(), true, Vec::new(), None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::new(vec![v; shape.iter().product()], shape)
    }

    fn build(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward_fn,
            }),
        }
    }

    /// Node constructor for ops: output requires gradients iff recording is
    /// enabled and any parent does, in which case `backward` is kept.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let track = tape_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Self::build(data, shape, true, parents, Some(backward))
        } else {
            Self::build(data, shape, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Borrow of the forward value.
    pub fn data(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    /// Copy of the forward value.
    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape());
        self.node.data.borrow()[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrites the value in place. Restricted to leaves so recorded
    /// graphs can never observe a mutation (optimizer updates only).
    pub(crate) fn set_data(&self, data: Vec<f64>) {
        assert!(
            self.node.backward_fn.is_none() && self.node.parents.is_empty(),
            "set_data is only valid on leaf tensors"
        );
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        *self.node.data.borrow_mut() = data;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        if !self.node.requires_grad {
            return;
        }
        assert_eq!(g.len(), self.numel(), "gradient length mismatch");
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Fills the gradient slot with zeros if it is still empty.
    pub fn ensure_zero_grad(&self) {
        let mut slot = self.node.grad.borrow_mut();
        if slot.is_none() {
            *slot = Some(vec![0.0; self.numel()]);
        }
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.node.data.borrow().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }

    /// Reverse-mode gradient accumulation from a scalar.
    ///
    /// Every tensor reachable from `self` that requires gradients receives
    /// d(self)/d(tensor) in its grad slot (accumulating on repeated calls).
    pub fn backward(&self) {
        assert!(
            self.is_scalar(),
            "backward() requires a scalar loss, got shape {:?}",
            self.shape()
        );
        assert!(
            self.node.requires_grad,
            "backward() on a tensor with no recorded graph"
        );

        // Parents are created before children, so ascending node id is a
        // topological order of the reachable subgraph.
        let mut reachable: Vec<Tensor> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.node.id) {
                continue;
            }
            for p in &t.node.parents {
                if p.requires_grad() {
                    stack.push(p.clone());
                }
            }
            reachable.push(t);
        }
        reachable.sort_by_key(|t| t.node.id);

        self.accumulate_grad(&[1.0]);
        for t in reachable.iter().rev() {
            if let Some(f) = &t.node.backward_fn {
                let g = t
                    .node
                    .grad
                    .borrow()
                    .clone()
                    .unwrap_or_else(|| vec![0.0; t.numel()]);
                f(&g);
            }
        }
    }
}
