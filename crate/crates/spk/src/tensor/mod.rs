//! Reverse-mode autodiff over `ndarray` storage.
//!
//! Small, f64, single-threaded, CPU-only: enough to drive the training loop
//! deterministically. A [`Tensor`] is a shared handle to a graph node; ops
//! build the DAG eagerly and [`Tensor::backward`] walks it in reverse
//! topological order. Tensors flowing through batches during evaluation are
//! plain constants (no parents), so untracked paths cost nothing.

pub mod ops;

pub use ops::*;

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Raw storage for tensor values and gradients.
pub type Data = ArrayD<f64>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Node {
    id: u64,
    value: RefCell<Data>,
    grad: RefCell<Option<Data>>,
    /// Leaf that accumulates gradients (a trainable parameter).
    requires_grad: bool,
    /// True if a backward pass through this node can reach a parameter.
    tracked: bool,
    parents: Vec<Tensor>,
    /// Maps the upstream gradient to one gradient per parent.
    backward: Option<BackwardFn>,
}

type BackwardFn = Box<dyn Fn(&Data) -> Vec<Option<Data>>>;

/// Shared handle to an autodiff graph node.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .field("tracked", &self.node.tracked)
            .finish()
    }
}

impl Tensor {
    /// A constant: not tracked, never receives gradients.
    pub fn constant(data: Data) -> Self {
        Self::leaf(data, false)
    }

    /// A trainable leaf that accumulates gradients.
    pub fn parameter(data: Data) -> Self {
        Self::leaf(data, true)
    }

    fn leaf(data: Data, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                tracked: requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn from_op(data: Data, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        let tracked = parents.iter().any(|p| p.node.tracked);
        if !tracked {
            // Nothing upstream wants gradients; drop the graph.
            return Tensor::constant(data);
        }
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                tracked,
                parents,
                backward: Some(backward),
            }),
        }
    }

    /// Snapshot of the value. Cheap for callers that immediately reduce it;
    /// clones the storage.
    pub fn value(&self) -> Data {
        self.node.value.borrow().clone()
    }

    /// Runs `f` against the value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Data) -> R) -> R {
        f(&self.node.value.borrow())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.value.borrow().shape().to_vec()
    }

    pub fn ndim(&self) -> usize {
        self.node.value.borrow().ndim()
    }

    pub fn len(&self) -> usize {
        self.node.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The value of a 0-d (or single-element) tensor.
    pub fn item(&self) -> f64 {
        let v = self.node.value.borrow();
        debug_assert_eq!(v.len(), 1, "item() on tensor with {} elements", v.len());
        *v.iter().next().expect("item() on empty tensor")
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_tracked(&self) -> bool {
        self.node.tracked
    }

    /// Cuts the graph: returns a constant holding a copy of the value.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.value())
    }

    /// Accumulated gradient of a parameter leaf, if any.
    pub fn grad(&self) -> Option<Data> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// In-place value update for optimizers. Shape must be preserved.
    pub fn update_value(&self, f: impl FnOnce(&mut Data)) {
        let mut v = self.node.value.borrow_mut();
        let shape = v.shape().to_vec();
        f(&mut v);
        debug_assert_eq!(v.shape(), &shape[..], "update_value changed shape");
    }

    /// Replaces the stored value (used by checkpoint restore).
    pub fn set_value(&self, data: Data) -> Result<()> {
        let mut v = self.node.value.borrow_mut();
        if v.shape() != data.shape() {
            return Err(Error::shape(
                "set_value",
                format!("stored {:?} vs incoming {:?}", v.shape(), data.shape()),
            ));
        }
        *v = data;
        Ok(())
    }

    /// Two handles referring to the same node.
    pub fn same_node(a: &Tensor, b: &Tensor) -> bool {
        Rc::ptr_eq(&a.node, &b.node)
    }

    /// Reverse-mode gradient accumulation from a scalar root.
    ///
    /// Gradients of every `requires_grad` leaf reachable from `self` are
    /// accumulated into their `grad` slots (summed with any existing grad).
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.node.tracked {
            return Err(Error::invalid(
                "backward",
                "root is not connected to any parameter",
            ));
        }

        // Topological order via iterative DFS.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, bool> = HashMap::new(); // id -> fully expanded
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            match visited.get(&t.node.id) {
                Some(_) => continue,
                None => {
                    visited.insert(t.node.id, true);
                    stack.push((t.clone(), true));
                    for p in &t.node.parents {
                        if p.node.tracked && !visited.contains_key(&p.node.id) {
                            stack.push((p.clone(), false));
                        }
                    }
                }
            }
        }

        let mut grads: HashMap<u64, Data> = HashMap::new();
        grads.insert(
            self.node.id,
            ArrayD::from_elem(self.node.value.borrow().raw_dim(), 1.0),
        );

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.node.id) else {
                continue;
            };
            if t.node.requires_grad {
                let mut slot = t.node.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => *acc += &g,
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(back) = &t.node.backward {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), t.node.parents.len());
                for (p, pg) in t.node.parents.iter().zip(parent_grads) {
                    if !p.node.tracked {
                        continue;
                    }
                    if let Some(pg) = pg {
                        debug_assert_eq!(
                            pg.shape(),
                            p.node.value.borrow().shape(),
                            "gradient shape mismatch"
                        );
                        match grads.get_mut(&p.node.id) {
                            Some(acc) => *acc += &pg,
                            None => {
                                grads.insert(p.node.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn constant_paths_are_pruned() {
        let a = Tensor::constant(arr1(&[1.0, 2.0]).into_dyn());
        let b = Tensor::constant(arr1(&[3.0, 4.0]).into_dyn());
        let c = add(&a, &b).unwrap();
        assert!(!c.is_tracked());
        assert!(c.node.parents.is_empty());
    }

    #[test]
    fn backward_accumulates_into_leaves() {
        let a = Tensor::parameter(arr1(&[1.0, 2.0, 3.0]).into_dyn());
        let s = sum_all(&scale(&a, 2.0));
        s.backward().unwrap();
        let g = a.grad().unwrap();
        assert_eq!(g, arr1(&[2.0, 2.0, 2.0]).into_dyn());
        // second backward accumulates
        let s2 = sum_all(&a);
        s2.backward().unwrap();
        assert_eq!(a.grad().unwrap(), arr1(&[3.0, 3.0, 3.0]).into_dyn());
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // y = sum(a*2) + sum(a*3) -> dy/da = 5
        let a = Tensor::parameter(arr1(&[1.0, 1.0]).into_dyn());
        let y = add(&sum_all(&scale(&a, 2.0)), &sum_all(&scale(&a, 3.0))).unwrap();
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap(), arr1(&[5.0, 5.0]).into_dyn());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let a = Tensor::parameter(arr1(&[1.0, 2.0]).into_dyn());
        let y = scale(&a, 2.0);
        assert!(y.backward().is_err());
    }

    #[test]
    fn detach_cuts_the_graph() {
        let a = Tensor::parameter(arr1(&[1.0, 2.0]).into_dyn());
        let d = scale(&a, 2.0).detach();
        assert!(!d.is_tracked());
        let s = sum_all(&d);
        assert!(s.backward().is_err());
        assert!(a.grad().is_none());
    }
}
