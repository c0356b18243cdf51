//! Contrastive objectives.

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Normalized-temperature cross-entropy (the SimCLR objective).
///
/// Rows of `z1` and `z2` are paired by position: row `i` of each is a view
/// of the same source sample. Both inputs are L2-normalized internally, so
/// callers should pass raw projector outputs and must not normalize first.
/// Every anchor's denominator ranges over all other rows of the stacked
/// `[z1; z2]` matrix (self excluded); the positive is the sibling view.
pub fn nt_xent(z1: &Tensor, z2: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::invalid("nt_xent", "temperature must be positive"));
    }
    if z1.shape() != z2.shape() {
        return Err(Error::shape(
            "nt_xent",
            format!("{:?} vs {:?}", z1.shape(), z2.shape()),
        ));
    }
    if z1.ndim() != 2 || z1.shape()[0] == 0 {
        return Err(Error::invalid(
            "nt_xent",
            "inputs must be non-empty (N, D) matrices",
        ));
    }
    for (name, z) in [("z1", z1), ("z2", z2)] {
        if z.with_value(|v| v.iter().any(|e| !e.is_finite())) {
            return Err(Error::NonFinite {
                what: format!("nt_xent input {name}"),
                step: None,
            });
        }
    }
    let n = z1.shape()[0];
    let u1 = ops::l2_normalize_rows(z1, 1e-12)?;
    let u2 = ops::l2_normalize_rows(z2, 1e-12)?;
    let u = ops::concat_rows(&u1, &u2)?;
    let sim = ops::scale(&ops::matmul_nt(&u, &u)?, 1.0 / temperature);
    let positives: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
    ops::paired_softmax_nll(&sim, &positives)
}
