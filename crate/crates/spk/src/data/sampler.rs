//! Epoch index generation.

use crate::error::{Error, Result};
use crate::rng::{derive_rng, label};
use rand::seq::SliceRandom;

/// One epoch's index stream for view-repeated sampling: a seeded random
/// permutation of `0..n_samples` with every index emitted `n_views` times
/// consecutively. Deterministic in `(seed, epoch)`; different epochs get
/// different permutations.
pub fn sampler_indices(
    n_samples: usize,
    n_views: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<usize>> {
    if n_samples == 0 {
        return Err(Error::invalid("sampler_indices", "n_samples must be positive"));
    }
    if n_views == 0 {
        return Err(Error::invalid("sampler_indices", "n_views must be positive"));
    }
    let mut perm: Vec<usize> = (0..n_samples).collect();
    let mut rng = derive_rng(seed, &[label("sampler"), epoch]);
    perm.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n_samples * n_views);
    for &i in &perm {
        for _ in 0..n_views {
            out.push(i);
        }
    }
    Ok(out)
}

/// Sampler that repeats each dataset index `n_views` times per epoch so a
/// multi-view transform can produce one view per fetch.
#[derive(Debug, Clone)]
pub struct RepeatedRandomSampler {
    pub n_samples: usize,
    pub n_views: usize,
    pub seed: u64,
}

impl RepeatedRandomSampler {
    pub fn indices(&self, epoch: u64) -> Result<Vec<usize>> {
        sampler_indices(self.n_samples, self.n_views, self.seed, epoch)
    }
}
