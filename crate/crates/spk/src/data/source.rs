//! Record sources: indexable datasets yielding raw, untransformed fields.

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use ndarray::{Array1, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// One raw field of a record, before any transform or batching.
#[derive(Debug, Clone)]
pub enum Field {
    /// `(C, H, W)` image with values in `[0, 1]`.
    Image(Array3<f64>),
    Vector(Array1<f64>),
    Int(i64),
    Float(f64),
}

impl Field {
    pub fn type_name(&self) -> &'static str {
        match self {
            Field::Image(_) => "image",
            Field::Vector(_) => "vector",
            Field::Int(_) => "int",
            Field::Float(_) => "float",
        }
    }
}

/// An indexable source of records. `fetch` must be pure with respect to the
/// index: the same index always yields the same record.
pub trait RecordSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn fetch(&self, index: usize) -> Result<Vec<Field>>;
}

/// Procedurally generated labeled images. Each class has a fixed stripe
/// template (a class-specific orientation and frequency); samples add seeded
/// noise on top, so nearby samples of one class stay visually close while
/// classes remain separable. Mean intensity is the same for every class, so
/// label information lives in the spatial pattern rather than in first-order
/// color statistics. Records are `(image, label)`.
pub struct SyntheticImages {
    n_samples: usize,
    n_classes: usize,
    size: usize,
    noise: f64,
    seed: u64,
}

impl SyntheticImages {
    pub fn new(n_samples: usize, n_classes: usize, size: usize, noise: f64, seed: u64) -> Result<Self> {
        if n_samples == 0 || n_classes == 0 || size == 0 {
            return Err(Error::config("synthetic_images needs samples, classes and size > 0"));
        }
        Ok(Self { n_samples, n_classes, size, noise, seed })
    }

    fn template(&self, class: usize, y: usize, x: usize, c: usize) -> f64 {
        let k = class as f64;
        let fy = y as f64 / self.size as f64;
        let fx = x as f64 / self.size as f64;
        // stripes rotate with class; frequency cycles low enough to survive
        // crop-and-resize resampling, and the per-channel phase shift keeps
        // the channels distinct without giving any class its own mean color
        let angle = k * std::f64::consts::PI / self.n_classes as f64;
        let cycles = 2.0 + (class % 5) as f64;
        let phase = fy * angle.cos() + fx * angle.sin() + 0.07 * c as f64;
        0.5 + 0.3 * (2.0 * std::f64::consts::PI * cycles * phase).sin()
    }
}

impl RecordSource for SyntheticImages {
    fn len(&self) -> usize {
        self.n_samples
    }

    fn fetch(&self, index: usize) -> Result<Vec<Field>> {
        if index >= self.n_samples {
            return Err(Error::invalid(
                "synthetic_images",
                format!("index {index} out of range {}", self.n_samples),
            ));
        }
        let class = index % self.n_classes;
        let mut rng = derive_rng(self.seed, &[crate::rng::label("sample"), index as u64]);
        let mut img = Array3::zeros((3, self.size, self.size));
        for c in 0..3 {
            for y in 0..self.size {
                for x in 0..self.size {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    img[(c, y, x)] =
                        (self.template(class, y, x, c) + self.noise * n).clamp(0.0, 1.0);
                }
            }
        }
        Ok(vec![Field::Image(img), Field::Int(class as i64)])
    }
}

/// Labeled Gaussian clusters in `dim` dimensions. Records are
/// `(vector, label)`. Useful for fast pipeline and probe tests.
pub struct GaussianBlobs {
    n_samples: usize,
    n_classes: usize,
    spread: f64,
    seed: u64,
    centers: Vec<Array1<f64>>,
}

impl GaussianBlobs {
    pub fn new(n_samples: usize, n_classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Self> {
        if n_samples == 0 || n_classes == 0 || dim == 0 {
            return Err(Error::config("gaussian_blobs needs samples, classes and dim > 0"));
        }
        let mut rng = derive_rng(seed, &[crate::rng::label("centers")]);
        let centers = (0..n_classes)
            .map(|_| Array1::from_shape_fn(dim, |_| rng.random_range(-4.0..4.0)))
            .collect();
        Ok(Self { n_samples, n_classes, spread, seed, centers })
    }
}

impl RecordSource for GaussianBlobs {
    fn len(&self) -> usize {
        self.n_samples
    }

    fn fetch(&self, index: usize) -> Result<Vec<Field>> {
        if index >= self.n_samples {
            return Err(Error::invalid(
                "gaussian_blobs",
                format!("index {index} out of range {}", self.n_samples),
            ));
        }
        let class = index % self.n_classes;
        let mut rng = derive_rng(self.seed, &[crate::rng::label("sample"), index as u64]);
        let mut v = self.centers[class].clone();
        for e in v.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *e += self.spread * n;
        }
        Ok(vec![Field::Vector(Array1::from(v.to_vec())), Field::Int(class as i64)])
    }
}

/// In-memory source backed by a plain vector of records. Mostly for tests.
pub struct VecSource {
    records: Vec<Vec<Field>>,
}

impl VecSource {
    pub fn new(records: Vec<Vec<Field>>) -> Self {
        Self { records }
    }
}

impl RecordSource for VecSource {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn fetch(&self, index: usize) -> Result<Vec<Field>> {
        self.records
            .get(index)
            .cloned()
            .ok_or_else(|| Error::invalid("vec_source", format!("index {index} out of range")))
    }
}
