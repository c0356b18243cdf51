//! Classification metric kernels.

use crate::error::{Error, Result};
use ndarray::ArrayView2;

/// Fraction of rows whose target class ranks among the top `k` logits.
///
/// A row counts as correct when fewer than `k` entries outrank the target,
/// where an entry outranks it if strictly larger, or equal with a lower
/// index (ties at the cutoff resolve toward lower indices).
pub fn topk_accuracy(logits: ArrayView2<'_, f64>, targets: &[usize], k: usize) -> Result<f64> {
    let (m, c) = logits.dim();
    if k < 1 || k > c {
        return Err(Error::invalid(
            "topk_accuracy",
            format!("k={k} out of range for {c} classes"),
        ));
    }
    if targets.len() != m {
        return Err(Error::shape(
            "topk_accuracy",
            format!("{m} rows vs {} targets", targets.len()),
        ));
    }
    let mut correct = 0usize;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        if t >= c {
            return Err(Error::invalid(
                "topk_accuracy",
                format!("target {t} out of range for {c} classes"),
            ));
        }
        let lt = row[t];
        let mut rank = 0usize;
        for (j, &l) in row.iter().enumerate() {
            if l > lt || (l == lt && j < t) {
                rank += 1;
            }
        }
        if rank < k {
            correct += 1;
        }
    }
    Ok(correct as f64 / m as f64)
}
