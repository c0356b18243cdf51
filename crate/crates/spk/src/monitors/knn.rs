//! Non-parametric k-nearest-neighbor prediction over queued features.

use crate::error::{Error, Result};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Euclidean,
    Cosine,
}

fn normalized_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// Classifies each query row by majority vote over its `k` nearest stored
/// rows. Vote ties resolve to the nearest neighbor among the tied classes;
/// distance ties resolve by insertion order.
pub fn knn_predict(
    queries: ArrayView2<'_, f64>,
    stored: ArrayView2<'_, f64>,
    labels: &[i64],
    k: usize,
    distance: Distance,
) -> Result<Vec<i64>> {
    if k == 0 {
        return Err(Error::invalid("knn_predict", "k must be at least 1"));
    }
    if stored.nrows() < k {
        return Err(Error::invalid(
            "knn_predict",
            format!("k={k} exceeds stored count {}", stored.nrows()),
        ));
    }
    if stored.nrows() != labels.len() {
        return Err(Error::shape(
            "knn_predict",
            format!("{} stored rows vs {} labels", stored.nrows(), labels.len()),
        ));
    }
    if queries.ncols() != stored.ncols() {
        return Err(Error::shape(
            "knn_predict",
            format!("query dim {} vs stored dim {}", queries.ncols(), stored.ncols()),
        ));
    }

    let (q, s) = match distance {
        Distance::Euclidean => (queries.to_owned(), stored.to_owned()),
        Distance::Cosine => (normalized_rows(queries), normalized_rows(stored)),
    };
    // dist^2(i, j) = |q_i|^2 + |s_j|^2 - 2 q_i . s_j, computed with one gemm
    let mut cross = Array2::zeros((q.nrows(), s.nrows()));
    general_mat_mul(1.0, &q, &s.t().to_owned(), 0.0, &mut cross);
    let qn: Vec<f64> = q.rows().into_iter().map(|r| r.dot(&r)).collect();
    let sn: Vec<f64> = s.rows().into_iter().map(|r| r.dot(&r)).collect();

    let mut out = Vec::with_capacity(q.nrows());
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(s.nrows());
    for i in 0..q.nrows() {
        scratch.clear();
        for j in 0..s.nrows() {
            scratch.push((qn[i] + sn[j] - 2.0 * cross[(i, j)], j));
        }
        scratch.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let neighbors = &scratch[..k];

        let mut counts: Vec<(i64, usize)> = Vec::new();
        for &(_, j) in neighbors {
            match counts.iter_mut().find(|(l, _)| *l == labels[j]) {
                Some((_, c)) => *c += 1,
                None => counts.push((labels[j], 1)),
            }
        }
        let best = counts.iter().map(|&(_, c)| c).max().expect("k >= 1");
        let winner = neighbors
            .iter()
            .find(|&&(_, j)| {
                counts
                    .iter()
                    .any(|&(l, c)| l == labels[j] && c == best)
            })
            .expect("some neighbor carries the majority label");
        out.push(labels[winner.1]);
    }
    Ok(out)
}
