//! Data pipeline: record sources adapted into keyed batches, per-sample
//! transforms (optionally multi-view), repeated-random sampling, and the
//! loader/DataModule plumbing that feeds the training loop.

pub mod sampler;
pub mod source;
pub mod transforms;

pub use sampler::{sampler_indices, RepeatedRandomSampler};
pub use source::{Field, GaussianBlobs, RecordSource, SyntheticImages, VecSource};
pub use transforms::{Transform, TransformPipeline};

use crate::batch::{Batch, Value};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, label};
use crate::tensor::Tensor;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeSet;
use std::rc::Rc;

fn field_to_value(field: &Field) -> Value {
    match field {
        Field::Image(img) => Value::Tensor(Tensor::constant(img.clone().into_dyn())),
        Field::Vector(v) => Value::Tensor(Tensor::constant(v.clone().into_dyn())),
        Field::Int(i) => Value::Int(*i),
        Field::Float(f) => Value::Scalar(*f),
    }
}

/// Maps one positional record onto named keys and runs the transform
/// pipeline. A multi-view pipeline returns one batch per view: all views
/// share the non-image fields and differ in the transformed image.
pub fn adapt_item(
    fields: &[Field],
    names: &[String],
    transform: &TransformPipeline,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Batch>> {
    if fields.len() != names.len() {
        return Err(Error::invalid(
            "adapt_item",
            format!(
                "expected {} fields for names {:?}, record has {}",
                names.len(),
                names,
                fields.len()
            ),
        ));
    }
    let n_views = transform.n_views();
    let mut out = Vec::with_capacity(n_views);
    for slot in 0..n_views {
        let mut batch = Batch::new();
        for (name, field) in names.iter().zip(fields) {
            let value = match field {
                Field::Image(img) => {
                    let t = transform.apply_view(img, slot, rng)?;
                    Value::Tensor(Tensor::constant(t.into_dyn()))
                }
                other => field_to_value(other),
            };
            batch.insert(name.clone(), value);
        }
        out.push(batch);
    }
    Ok(out)
}

/// A record source exposed as an indexable dataset of keyed, transformed
/// items. Length equals the source length; views multiply rows only at
/// sampling time, never here.
pub struct DatasetAdapter {
    source: Rc<dyn RecordSource>,
    names: Vec<String>,
    transform: TransformPipeline,
}

impl DatasetAdapter {
    pub fn new(
        source: Rc<dyn RecordSource>,
        names: Vec<String>,
        transform: TransformPipeline,
    ) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::config("dataset adapter needs at least one field name"));
        }
        transform.validate()?;
        Ok(Self { source, names, transform })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn n_views(&self) -> usize {
        self.transform.n_views()
    }

    /// All views of one record (the op-level form).
    pub fn item(&self, index: usize, rng: &mut ChaCha12Rng) -> Result<Vec<Batch>> {
        let fields = self.source.fetch(index)?;
        adapt_item(&fields, &self.names, &self.transform, rng)
    }

    /// A single view of one record. The loader calls this once per emitted
    /// sampler position, so each occurrence of a repeated index gets its own
    /// RNG stream and therefore its own augmentation draw.
    pub fn view(&self, index: usize, slot: usize, rng: &mut ChaCha12Rng) -> Result<Batch> {
        let fields = self.source.fetch(index)?;
        if fields.len() != self.names.len() {
            return Err(Error::invalid(
                "adapt_item",
                format!(
                    "expected {} fields for names {:?}, record has {}",
                    self.names.len(),
                    self.names,
                    fields.len()
                ),
            ));
        }
        let mut batch = Batch::new();
        for (name, field) in self.names.iter().zip(&fields) {
            let value = match field {
                Field::Image(img) => {
                    let t = self.transform.apply_view(img, slot, rng)?;
                    Value::Tensor(Tensor::constant(t.into_dyn()))
                }
                other => field_to_value(other),
            };
            batch.insert(name.clone(), value);
        }
        Ok(batch)
    }
}

fn key_set(batch: &Batch) -> BTreeSet<String> {
    batch.keys().map(str::to_owned).collect()
}

/// Collates per-sample items into one batch: tensors gain a leading row
/// dimension, ints become `IntVec`, floats become a 1-d tensor. The dataset
/// indices the sampler emitted are injected as `sample_idx`, row-aligned.
pub fn assemble_batch(items: &[Batch], indices: &[usize]) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::invalid("assemble_batch", "no items to collate"));
    }
    if indices.len() != items.len() {
        return Err(Error::invalid(
            "assemble_batch",
            format!("{} items but {} indices", items.len(), indices.len()),
        ));
    }
    let reference = key_set(&items[0]);
    for item in &items[1..] {
        let other = key_set(item);
        if other != reference {
            let diff: Vec<&String> = reference.symmetric_difference(&other).collect();
            return Err(Error::invalid(
                "assemble_batch",
                format!("items disagree on keys; difference: {diff:?}"),
            ));
        }
    }
    let n = items.len();
    let mut out = Batch::new();
    for key in items[0].keys().map(str::to_owned).collect::<Vec<_>>() {
        let first = items[0].get(&key).unwrap();
        let value = match first {
            Value::Tensor(t0) => {
                let shape = t0.shape();
                let mut stacked_shape = vec![n];
                stacked_shape.extend_from_slice(&shape);
                let mut data = ArrayD::zeros(IxDyn(&stacked_shape));
                let row_len: usize = shape.iter().product();
                for (i, item) in items.iter().enumerate() {
                    let t = match item.get(&key) {
                        Some(Value::Tensor(t)) => t,
                        Some(v) => {
                            return Err(Error::invalid(
                                "assemble_batch",
                                format!("key {key:?}: tensor in item 0, {} in item {i}", v.type_name()),
                            ))
                        }
                        None => unreachable!("key sets already checked"),
                    };
                    if t.shape() != shape {
                        return Err(Error::shape(
                            "assemble_batch",
                            format!("key {key:?}: item 0 is {shape:?}, item {i} is {:?}", t.shape()),
                        ));
                    }
                    t.with_value(|v| {
                        data.as_slice_mut().unwrap()[i * row_len..(i + 1) * row_len]
                            .copy_from_slice(v.as_standard_layout().as_slice().unwrap());
                    });
                }
                Value::Tensor(Tensor::constant(data))
            }
            Value::Int(_) => {
                let mut v = Vec::with_capacity(n);
                for (i, item) in items.iter().enumerate() {
                    match item.get(&key) {
                        Some(Value::Int(x)) => v.push(*x),
                        Some(other) => {
                            return Err(Error::invalid(
                                "assemble_batch",
                                format!("key {key:?}: int in item 0, {} in item {i}", other.type_name()),
                            ))
                        }
                        None => unreachable!(),
                    }
                }
                Value::IntVec(v)
            }
            Value::Scalar(_) => {
                let mut v = Vec::with_capacity(n);
                for (i, item) in items.iter().enumerate() {
                    match item.get(&key) {
                        Some(Value::Scalar(x)) => v.push(*x),
                        Some(other) => {
                            return Err(Error::invalid(
                                "assemble_batch",
                                format!("key {key:?}: float in item 0, {} in item {i}", other.type_name()),
                            ))
                        }
                        None => unreachable!(),
                    }
                }
                Value::Tensor(Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[n]), v).unwrap()))
            }
            other => {
                return Err(Error::invalid(
                    "assemble_batch",
                    format!("key {key:?} holds {}, which cannot be collated", other.type_name()),
                ))
            }
        };
        out.insert(key, value);
    }
    out.insert(
        "sample_idx",
        Value::IntVec(indices.iter().map(|&i| i as i64).collect()),
    );
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Indices in dataset order, each repeated `n_views` times consecutively.
    Sequential,
    /// Uniformly shuffled group order per `(seed, epoch)`, each index
    /// repeated `n_views` times consecutively.
    RepeatedRandom,
}

/// Batch-emitting loader. `batch_size` counts rows (views), not source
/// samples, and must be a multiple of the view count so view groups are
/// never split across batches. With `drop_last`, the trailing partial batch
/// is dropped as whole groups.
pub struct DataLoader {
    dataset: DatasetAdapter,
    batch_size: usize,
    sampler: SamplerKind,
    drop_last: bool,
    seed: u64,
}

impl DataLoader {
    pub fn new(
        dataset: DatasetAdapter,
        batch_size: usize,
        sampler: SamplerKind,
        drop_last: bool,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if dataset.is_empty() {
            return Err(Error::config("loader dataset is empty"));
        }
        let v = dataset.n_views();
        if !batch_size.is_multiple_of(v) {
            return Err(Error::config(format!(
                "batch_size {batch_size} is not a multiple of the view count {v}; \
                 view groups would be split across batches"
            )));
        }
        Ok(Self { dataset, batch_size, sampler, drop_last, seed })
    }

    pub fn dataset(&self) -> &DatasetAdapter {
        &self.dataset
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn n_views(&self) -> usize {
        self.dataset.n_views()
    }

    fn positions(&self, epoch: u64) -> Vec<usize> {
        let n = self.dataset.len();
        let v = self.dataset.n_views();
        match self.sampler {
            SamplerKind::Sequential => {
                let mut out = Vec::with_capacity(n * v);
                for i in 0..n {
                    for _ in 0..v {
                        out.push(i);
                    }
                }
                out
            }
            SamplerKind::RepeatedRandom => {
                sampler_indices(n, v, self.seed, epoch).expect("dataset checked non-empty")
            }
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        let total = self.dataset.len() * self.dataset.n_views();
        if self.drop_last {
            total / self.batch_size
        } else {
            total.div_ceil(self.batch_size)
        }
    }

    /// Lazy iterator over one epoch's batches.
    pub fn epoch(&self, epoch: u64) -> EpochIter<'_> {
        EpochIter {
            loader: self,
            indices: self.positions(epoch),
            epoch,
            next_start: 0,
        }
    }
}

pub struct EpochIter<'a> {
    loader: &'a DataLoader,
    indices: Vec<usize>,
    epoch: u64,
    next_start: usize,
}

impl EpochIter<'_> {
    fn build(&self, start: usize, end: usize) -> Result<Batch> {
        let v = self.loader.dataset.n_views();
        let mut items = Vec::with_capacity(end - start);
        for position in start..end {
            let index = self.indices[position];
            let mut rng = derive_rng(
                self.loader.seed,
                &[label("transform"), self.epoch, position as u64],
            );
            items.push(self.loader.dataset.view(index, position % v, &mut rng)?);
        }
        assemble_batch(&items, &self.indices[start..end])
    }
}

impl Iterator for EpochIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let start = self.next_start;
        if start >= self.indices.len() {
            return None;
        }
        let mut end = (start + self.loader.batch_size).min(self.indices.len());
        if end - start < self.loader.batch_size && self.loader.drop_last {
            self.next_start = self.indices.len();
            return None;
        }
        // keep whole view groups even in a ragged tail
        let v = self.loader.dataset.n_views();
        end -= (end - start) % v;
        if end == start {
            self.next_start = self.indices.len();
            return None;
        }
        self.next_start = end;
        Some(self.build(start, end))
    }
}

/// Loaders for each stage. `train` is required; `val` and `test` are not.
pub struct DataModule {
    pub train: DataLoader,
    pub val: Option<DataLoader>,
    pub test: Option<DataLoader>,
}

impl DataModule {
    pub fn new(train: DataLoader, val: Option<DataLoader>, test: Option<DataLoader>) -> Self {
        Self { train, val, test }
    }
}
