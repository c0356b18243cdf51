//! The dictionary-shaped batch protocol.
//!
//! Everything in the framework speaks `Batch`: data loaders emit them,
//! forward functions consume and return them, callbacks read them. Keys are
//! free-form strings; a handful of well-known keys (`image`, `label`,
//! `embedding`, `loss`, `sample_idx`) carry conventions that
//! [`validate_batch`] can check, and unknown keys always pass through
//! untouched.

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};
use indexmap::IndexMap;
use std::fmt;

/// Which phase of the loop a forward call serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Train,
    Validate,
    Test,
    Predict,
}

impl Stage {
    /// Prefix used in log record names, e.g. `train/loss`, `val/knn/top1`.
    pub fn log_prefix(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Validate => "val",
            Stage::Test => "test",
            Stage::Predict => "predict",
        }
    }

    pub fn is_train(self) -> bool {
        matches!(self, Stage::Train)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.log_prefix())
    }
}

/// A batch value: a tensor, plain integers, a scalar, or a nested list.
#[derive(Debug, Clone)]
pub enum Value {
    Tensor(Tensor),
    Int(i64),
    IntVec(Vec<i64>),
    Scalar(f64),
    List(Vec<Value>),
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Tensor(_) => "tensor",
            Value::Int(_) => "int",
            Value::IntVec(_) => "int vector",
            Value::Scalar(_) => "scalar",
            Value::List(_) => "list",
        }
    }
}

impl From<Tensor> for Value {
    fn from(t: Tensor) -> Self {
        Value::Tensor(t)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Scalar(v)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<Vec<i64>> for Value {
    fn from(v: Vec<i64>) -> Self {
        Value::IntVec(v)
    }
}

/// An ordered, open key→value mapping. Cloning is cheap: tensors are
/// reference-counted handles.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    entries: IndexMap<String, Value>,
}

impl Batch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<Value> {
        self.entries.shift_remove(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn key_err(&self, key: &str) -> Error {
        Error::KeyMissing {
            key: key.to_string(),
            available: self.keys().collect::<Vec<_>>().join(", "),
        }
    }

    /// The tensor stored under `key`.
    pub fn tensor(&self, key: &str) -> Result<&Tensor> {
        match self.get(key) {
            Some(Value::Tensor(t)) => Ok(t),
            Some(other) => Err(Error::KeyType {
                key: key.to_string(),
                expected: "tensor",
                found: other.type_name(),
            }),
            None => Err(self.key_err(key)),
        }
    }

    /// The integer vector stored under `key`.
    pub fn int_vec(&self, key: &str) -> Result<&[i64]> {
        match self.get(key) {
            Some(Value::IntVec(v)) => Ok(v),
            Some(other) => Err(Error::KeyType {
                key: key.to_string(),
                expected: "int vector",
                found: other.type_name(),
            }),
            None => Err(self.key_err(key)),
        }
    }

    /// The scalar stored under `key`.
    pub fn scalar(&self, key: &str) -> Result<f64> {
        match self.get(key) {
            Some(Value::Scalar(v)) => Ok(*v),
            Some(Value::Tensor(t)) if t.len() == 1 => Ok(t.item()),
            Some(other) => Err(Error::KeyType {
                key: key.to_string(),
                expected: "scalar",
                found: other.type_name(),
            }),
            None => Err(self.key_err(key)),
        }
    }

    /// The training loss, if the forward emitted one. Accepts a plain scalar
    /// or a single-element tensor (the usual case: a loss with a gradient
    /// graph attached).
    pub fn loss(&self) -> Option<&Value> {
        self.get("loss")
    }

    pub fn sample_idx(&self) -> Result<&[i64]> {
        self.int_vec("sample_idx")
    }
}

impl FromIterator<(String, Value)> for Batch {
    fn from_iter<I: IntoIterator<Item = (String, Value)>>(iter: I) -> Self {
        Batch {
            entries: iter.into_iter().collect(),
        }
    }
}

/// One problem found by [`validate_batch`]: the offending key and the rule
/// it breaks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub key: String,
    pub rule: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.rule)
    }
}

fn diag(key: &str, rule: impl Into<String>) -> Diagnostic {
    Diagnostic {
        key: key.to_string(),
        rule: rule.into(),
    }
}

/// Checks a batch against the protocol conventions and a caller-supplied
/// required-key list. Returns one diagnostic per violation; an empty list
/// means the batch is well-formed. Never fails and never mutates the batch;
/// callers decide severity.
pub fn validate_batch(batch: &Batch, required_keys: &[&str]) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for &key in required_keys {
        if !batch.contains(key) {
            out.push(diag(key, "missing-key"));
        }
    }
    if let Some(loss) = batch.get("loss") {
        match loss {
            Value::Scalar(v) => {
                if !v.is_finite() {
                    out.push(diag("loss", "non-finite"));
                }
            }
            Value::Tensor(t) => {
                if t.len() != 1 {
                    out.push(diag("loss", "non-scalar"));
                } else if !t.item().is_finite() {
                    out.push(diag("loss", "non-finite"));
                }
            }
            other => out.push(diag("loss", format!("non-scalar ({})", other.type_name()))),
        }
    }
    if let Some(si) = batch.get("sample_idx") {
        match si {
            Value::IntVec(ids) => {
                for (key, value) in batch.iter() {
                    if key == "sample_idx" {
                        continue;
                    }
                    if let Value::Tensor(t) = value {
                        if t.ndim() >= 1 && t.shape()[0] != ids.len() {
                            out.push(diag(
                                key,
                                format!(
                                    "leading dimension {} does not match sample_idx length {}",
                                    t.shape()[0],
                                    ids.len()
                                ),
                            ));
                        }
                    }
                }
            }
            other => out.push(diag(
                "sample_idx",
                format!("expected int vector, found {}", other.type_name()),
            )),
        }
    }
    out
}

/// Splits a multi-view row block into per-view tensors.
///
/// `sample_idx` marks which source sample each row came from; every distinct
/// value must occur the same number of times V. Output `v` contains, at row
/// position `p`, the `(v+1)`-th occurrence of the `p`-th distinct sample
/// (distinct samples ordered by first appearance, occurrences in input
/// order). Rows of all outputs therefore align by source sample, which is
/// exactly the pairing a contrastive loss needs.
///
/// The split is differentiable: gradients flowing into any output scatter
/// back to the matching input rows.
pub fn fold_views(rows: &Tensor, sample_idx: &[i64]) -> Result<Vec<Tensor>> {
    if sample_idx.is_empty() {
        return Err(Error::invalid("fold_views", "empty sample_idx"));
    }
    if rows.ndim() < 1 || rows.shape()[0] != sample_idx.len() {
        return Err(Error::shape(
            "fold_views",
            format!(
                "{} rows vs sample_idx of length {}",
                rows.shape().first().copied().unwrap_or(0),
                sample_idx.len()
            ),
        ));
    }
    // Occurrence positions per distinct value, in first-appearance order.
    let mut order: Vec<i64> = Vec::new();
    let mut groups: IndexMap<i64, Vec<usize>> = IndexMap::new();
    for (pos, &id) in sample_idx.iter().enumerate() {
        groups
            .entry(id)
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(pos);
    }
    let v = groups[0].len();
    for (id, positions) in groups.iter() {
        if positions.len() != v {
            return Err(Error::invalid(
                "fold_views",
                format!(
                    "sample_idx {id} occurs {} times, expected {v}",
                    positions.len()
                ),
            ));
        }
    }
    let mut views = Vec::with_capacity(v);
    for view in 0..v {
        let idx: Vec<usize> = groups.values().map(|positions| positions[view]).collect();
        views.push(ops::gather_rows(rows, &idx)?);
    }
    Ok(views)
}
