//! Spectrum-entropy collapse diagnostics.
//!
//! Both metrics report an effective rank: the exponential of the Shannon
//! entropy of a normalized spectrum. A healthy embedding space spreads its
//! spectrum (high effective rank); collapse concentrates it toward one.

use crate::error::{Error, Result};
use crate::linalg;
use ndarray::{Array1, Array2, ArrayView2, ArrayView3, Axis};

pub const RANKME_EPS: f64 = 1e-7;
pub const LIDAR_DELTA: f64 = 1e-4;
pub const LIDAR_EPS: f64 = 1e-7;

fn spectrum_entropy_exp(spectrum: &Array1<f64>, eps: f64) -> f64 {
    let total: f64 = spectrum.sum();
    let mut entropy = 0.0;
    for &s in spectrum {
        let p = s / (total + eps);
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    entropy.exp()
}

/// Effective rank of an embedding matrix: singular values are normalized to
/// a distribution and its entropy exponentiated. Ranges from 1 (all rows on
/// one ray) to `min(N, D)` (flat spectrum), up to `eps` effects.
pub fn rankme(z: ArrayView2<'_, f64>, eps: f64) -> Result<f64> {
    if z.nrows() == 0 || z.ncols() == 0 {
        return Err(Error::invalid("rankme", "empty embedding matrix"));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("rankme", "eps must be positive"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "rankme input".into(),
            step: None,
        });
    }
    let sigma = linalg::singular_values(&z.to_owned());
    Ok(spectrum_entropy_exp(&sigma, eps))
}

/// Effective rank of the linear-discriminant spectrum of multi-view
/// embeddings, shaped `(n surrogate classes, q views, D)`.
///
/// Between-class covariance (unbiased, n−1) is whitened by the
/// delta-regularized within-class covariance; the whitened matrix's
/// eigenvalue distribution is entropy-exponentiated like `rankme`.
pub fn lidar(views: ArrayView3<'_, f64>, delta: f64, eps: f64) -> Result<f64> {
    let (n, q, d) = views.dim();
    if n < 2 {
        return Err(Error::invalid("lidar", "need at least 2 surrogate classes"));
    }
    if q < 1 || d < 1 {
        return Err(Error::invalid("lidar", "need at least 1 view and 1 dim"));
    }
    if delta <= 0.0 || eps <= 0.0 {
        return Err(Error::invalid("lidar", "delta and eps must be positive"));
    }
    if views.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "lidar input".into(),
            step: None,
        });
    }

    // class means and grand mean
    let mut means = Array2::zeros((n, d));
    for i in 0..n {
        let class = views.index_axis(Axis(0), i);
        means
            .row_mut(i)
            .assign(&class.mean_axis(Axis(0)).expect("q >= 1"));
    }
    let grand = means.mean_axis(Axis(0)).expect("n >= 2");

    let mut sigma_b = Array2::zeros((d, d));
    for i in 0..n {
        let c = &means.row(i) - &grand;
        for a in 0..d {
            for b in 0..d {
                sigma_b[(a, b)] += c[a] * c[b];
            }
        }
    }
    sigma_b /= (n - 1) as f64;

    let mut sigma_w = Array2::zeros((d, d));
    for i in 0..n {
        let class = views.index_axis(Axis(0), i);
        for j in 0..q {
            let c = &class.row(j) - &means.row(i);
            for a in 0..d {
                for b in 0..d {
                    sigma_w[(a, b)] += c[a] * c[b];
                }
            }
        }
    }
    sigma_w /= (n * q) as f64;
    for a in 0..d {
        sigma_w[(a, a)] += delta;
    }

    let (w_eigs, _) = linalg::sym_eigen(&sigma_w);
    if w_eigs.iter().any(|&l| l < -1e-9) {
        return Err(Error::invalid(
            "lidar",
            "within-class covariance not PSD after regularization",
        ));
    }

    let w = linalg::inv_sqrt_psd(&sigma_w, delta);
    let lambda = w.dot(&sigma_b).dot(&w);
    let (eigs, _) = linalg::sym_eigen(&lambda);
    let clamped = eigs.mapv(|l| l.max(0.0));
    Ok(spectrum_entropy_exp(&clamped, eps))
}
