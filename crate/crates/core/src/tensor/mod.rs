//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tensor`] is an immutable node in a dynamically built graph. Every
//! operation records its parents together with a closure computing the
//! vector-Jacobian product, and [`Tensor::backward`] walks the graph in
//! reverse topological order. Gradients of `requires_grad` tensors are
//! accumulated (`+=`) into their grad slot, so two backward passes without
//! zeroing double every gradient.
//!
//! Parameter values never change in place: the optimizer swaps fresh leaf
//! tensors into the [`ParamStore`] after each step.

mod checkpoint;
mod conv;
mod gradcheck;
mod linalg;
mod ops;
mod optim;
mod params;

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use conv::Conv2dSpec;
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport, InputCheck};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use params::{Init, ParamStore};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    /// Running hash of every branch decision (ReLU masks, max arg-indices)
    /// taken while tracing is on. Finite-difference checks compare it across
    /// perturbations to stay away from non-differentiable points.
    static BRANCH_TRACE: RefCell<Option<DefaultHasher>> = const { RefCell::new(None) };
}

pub(crate) fn trace_branches<T: Hash>(decisions: impl FnOnce() -> T) {
    BRANCH_TRACE.with(|t| {
        if let Some(h) = t.borrow_mut().as_mut() {
            decisions().hash(h);
        }
    });
}

/// Run `f` and return its result with the hash of the branches it took.
pub(crate) fn with_branch_trace<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = BRANCH_TRACE.with(|t| t.borrow_mut().replace(DefaultHasher::new()));
    let out = f();
    let h = BRANCH_TRACE.with(|t| {
        let mut slot = t.borrow_mut();
        let h = slot.take().map(|h| h.finish()).unwrap_or(0);
        *slot = prev;
        h
    });
    (out, h)
}

/// Vector-Jacobian product: given the output gradient, the output values and
/// the parents, return one optional gradient buffer per parent.
pub(crate) type GradFn =
    Box<dyn Fn(&[f64], &[f64], &[Tensor]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    id: u64,
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant tensor (no gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(data, shape, false)
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(data, shape, true)
    }

    pub fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::invalid("tensor", format!("bad shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::from_parts("leaf", data, shape.to_vec(), requires_grad, Vec::new(), None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::from_parts("leaf", vec![v], vec![1], false, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::from_parts("leaf", vec![0.0; numel(shape)], shape.to_vec(), false, Vec::new(), None)
    }

    pub(crate) fn from_parts(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        grad_fn: Option<GradFn>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len(), "{op}");
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            parents,
            grad_fn,
        }))
    }

    /// Build the result of an operation. The backward closure is only kept
    /// when at least one parent needs a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        grad_fn: GradFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Self::from_parts(op, data, shape, true, parents, Some(grad_fn))
        } else {
            Self::from_parts(op, data, shape, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Copy of the values cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::from_parts("detach", self.to_vec(), self.shape().to_vec(), false, Vec::new(), None)
    }

    /// Row count and row width when viewed as a matrix over the first axis.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        let rows = self.shape().first().copied().unwrap_or(1);
        let cols = if rows == 0 { 0 } else { self.len() / rows };
        (rows, cols)
    }

    /// Populate `grad` for every reachable tensor that requires it.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.0.id, vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            {
                let mut slot = node.0.grad.lock().expect("grad lock");
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g.clone()),
                }
            }
            let Some(grad_fn) = node.0.grad_fn.as_ref() else {
                continue;
            };
            let parent_grads = grad_fn(&g, &node.0.data, &node.0.parents);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len(), "{}", node.0.op);
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.len(), "grad size from {}", node.0.op);
                match pending.get_mut(&parent.0.id) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(parent.0.id, pg);
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // Iterative post-order DFS: (node, children_pushed).
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.0.parents.iter().rev() {
                if p.requires_grad() && !visited.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_loss_has_unit_grad() {
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        x.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let h = x.mul(&x).unwrap().exp();
        let loss = h.sum_all();
        loss.backward().unwrap();
        let g1 = x.grad().unwrap();
        let gh1 = h.grad().unwrap();
        loss.backward().unwrap();
        let g2 = x.grad().unwrap();
        assert_eq!(g2, g1.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
        assert_eq!(h.grad().unwrap(), gh1.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
        assert_eq!(loss.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.backward(), Err(Error::NotScalar(_))));
    }

    #[test]
    fn unreachable_grads_untouched() {
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let y = Tensor::param(vec![2.0], &[1]).unwrap();
        x.scale(2.0).backward().unwrap();
        assert!(y.grad().is_none());
    }

    #[test]
    fn diamond_graph_accumulates() {
        // loss = x*x + 3x, shares x along two paths
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let loss = x.mul(&x).unwrap().add(&x.scale(3.0)).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn shape_checked_on_construction() {
        assert!(Tensor::new(vec![1.0; 5], &[2, 3]).is_err());
    }
}
