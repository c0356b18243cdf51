//! Shared fixed-capacity feature storage for monitor callbacks.
//!
//! Multiple callbacks often want the same detached tensors (typically
//! embeddings). The registry hands every subscriber of a given key the same
//! physical ring buffer, sized to the largest request, so the features are
//! stored once no matter how many monitors read them.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use std::cell::{Cell, RefCell};
use std::rc::Rc;

/// A FIFO ring of detached feature rows plus companion labels.
///
/// The queue stores plain values, never graph-attached tensors, so nothing
/// reachable from it can carry gradients. Single-writer by design: the
/// training thread appends, validation-time readers run on the same thread.
pub struct FeatureQueue {
    key: String,
    dim: usize,
    capacity: Cell<usize>,
    rows: RefCell<Vec<Vec<f64>>>,
    labels: RefCell<Vec<i64>>,
    cursor: Cell<usize>,
}

impl FeatureQueue {
    fn new(key: &str, capacity: usize, dim: usize) -> Self {
        FeatureQueue {
            key: key.to_string(),
            dim,
            capacity: Cell::new(capacity),
            rows: RefCell::new(Vec::new()),
            labels: RefCell::new(Vec::new()),
            cursor: Cell::new(0),
        }
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity.get()
    }

    pub fn fill(&self) -> usize {
        self.rows.borrow().len()
    }

    /// Appends rows (oldest evicted once full). `labels[i]` annotates row
    /// `i`; pass `-1` for unlabeled data.
    pub fn append(&self, features: ArrayView2<'_, f64>, labels: &[i64]) -> Result<()> {
        if features.ncols() != self.dim {
            return Err(Error::shape(
                "queue_append",
                format!("features of width {}, queue dim {}", features.ncols(), self.dim),
            ));
        }
        if features.nrows() != labels.len() {
            return Err(Error::shape(
                "queue_append",
                format!("{} rows vs {} labels", features.nrows(), labels.len()),
            ));
        }
        let cap = self.capacity.get();
        let mut rows = self.rows.borrow_mut();
        let mut labs = self.labels.borrow_mut();
        for (row, &label) in features.rows().into_iter().zip(labels) {
            let owned: Vec<f64> = row.iter().copied().collect();
            if rows.len() < cap {
                rows.push(owned);
                labs.push(label);
            } else {
                let c = self.cursor.get();
                rows[c] = owned;
                labs[c] = label;
            }
            self.cursor.set((self.cursor.get() + 1) % cap);
        }
        Ok(())
    }

    /// Contents oldest-first as a dense matrix with aligned labels.
    pub fn snapshot(&self) -> (Array2<f64>, Vec<i64>) {
        let rows = self.rows.borrow();
        let labs = self.labels.borrow();
        let n = rows.len();
        let mut feats = Array2::zeros((n, self.dim));
        let mut labels = Vec::with_capacity(n);
        for out in 0..n {
            let src = if n < self.capacity.get() {
                out
            } else {
                (self.cursor.get() + out) % self.capacity.get()
            };
            for j in 0..self.dim {
                feats[(out, j)] = rows[src][j];
            }
            labels.push(labs[src]);
        }
        (feats, labels)
    }

    /// Replaces the contents with rows in oldest-first order (checkpoint
    /// restore). The ring is re-canonicalized: logical content round-trips
    /// exactly even though cursor position need not.
    pub fn restore(&self, features: ArrayView2<'_, f64>, labels: &[i64]) -> Result<()> {
        if features.nrows() > self.capacity.get() {
            return Err(Error::invalid(
                "queue_restore",
                format!(
                    "{} rows exceed capacity {}",
                    features.nrows(),
                    self.capacity.get()
                ),
            ));
        }
        self.rows.borrow_mut().clear();
        self.labels.borrow_mut().clear();
        self.cursor.set(0);
        self.append(features, labels)
    }

    fn grow(&self, new_capacity: usize) {
        if new_capacity <= self.capacity.get() {
            return;
        }
        // Re-linearize so existing content stays oldest-first under the
        // larger capacity.
        let (feats, labels) = self.snapshot();
        self.capacity.set(new_capacity);
        self.rows.borrow_mut().clear();
        self.labels.borrow_mut().clear();
        self.cursor.set(0);
        self.append(feats.view(), &labels).expect("shapes unchanged");
    }
}

/// Owns the physical queues; callbacks register interest and receive shared
/// handles.
#[derive(Default)]
pub struct QueueRegistry {
    queues: RefCell<Vec<Rc<FeatureQueue>>>,
}

impl QueueRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the queue for `key`, creating it on first registration.
    /// Later registrations share the same buffer, grown to the largest
    /// requested length. Two subscribers disagreeing on the feature width
    /// is a configuration error.
    pub fn register(
        &self,
        key: &str,
        requested_length: usize,
        dim: usize,
    ) -> Result<Rc<FeatureQueue>> {
        if requested_length == 0 {
            return Err(Error::invalid(
                "register_queue",
                "requested_length must be positive",
            ));
        }
        if dim == 0 {
            return Err(Error::invalid("register_queue", "dim must be positive"));
        }
        let mut queues = self.queues.borrow_mut();
        if let Some(existing) = queues.iter().find(|q| q.key() == key) {
            if existing.dim() != dim {
                return Err(Error::invalid(
                    "register_queue",
                    format!(
                        "key {key} already registered with dim {}, requested {dim}",
                        existing.dim()
                    ),
                ));
            }
            existing.grow(requested_length);
            return Ok(Rc::clone(existing));
        }
        let q = Rc::new(FeatureQueue::new(key, requested_length, dim));
        queues.push(Rc::clone(&q));
        Ok(q)
    }

    pub fn get(&self, key: &str) -> Option<Rc<FeatureQueue>> {
        self.queues.borrow().iter().find(|q| q.key() == key).map(Rc::clone)
    }

    /// All physical queues, for checkpointing.
    pub fn all(&self) -> Vec<Rc<FeatureQueue>> {
        self.queues.borrow().clone()
    }
}
