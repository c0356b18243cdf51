//! Dense symmetric eigendecomposition and singular values.
//!
//! The collapse diagnostics need spectra of small matrices (at most a few
//! hundred rows), so classical Jacobi iterations are plenty: they are simple,
//! deterministic, and accurate to near machine precision.

use ndarray::{Array1, Array2};

/// Eigenvalues and eigenvectors of a symmetric matrix via cyclic Jacobi
/// rotations. Eigenvalues are returned in descending order; eigenvectors are
/// the corresponding columns of the returned matrix.
pub fn sym_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let d = a.nrows();
    assert_eq!(d, a.ncols(), "sym_eigen needs a square matrix");
    let mut m = a.clone();
    let mut v = Array2::eye(d);
    let fro: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * fro.max(1.0);

    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[(p, q)];
                if apq.abs() <= tol / (d as f64) {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..d {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let vals = Array1::from_iter(order.iter().map(|&i| m[(i, i)]));
    let mut vecs = Array2::zeros((d, d));
    for (newc, &oldc) in order.iter().enumerate() {
        for r in 0..d {
            vecs[(r, newc)] = v[(r, oldc)];
        }
    }
    (vals, vecs)
}

/// Singular values of an arbitrary matrix via one-sided Jacobi, descending.
///
/// Rotations orthogonalize the columns in place; the singular values are the
/// final column norms. Works on the transpose when that is the smaller side.
pub fn singular_values(x: &Array2<f64>) -> Array1<f64> {
    let work = if x.nrows() >= x.ncols() {
        x.clone()
    } else {
        x.t().to_owned()
    };
    let mut a = work;
    let d = a.ncols();

    for _sweep in 0..64 {
        let mut rotated = false;
        for p in 0..d {
            for q in (p + 1)..d {
                let cp = a.column(p);
                let cq = a.column(q);
                let alpha = cp.dot(&cp);
                let beta = cq.dot(&cq);
                let gamma = cp.dot(&cq);
                // relative orthogonality test: |cos angle| below threshold
                let denom = (alpha * beta).sqrt();
                if denom == 0.0 || gamma.abs() <= 1e-15 * denom {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..a.nrows() {
                    let arp = a[(r, p)];
                    let arq = a[(r, q)];
                    a[(r, p)] = c * arp - s * arq;
                    a[(r, q)] = s * arp + c * arq;
                }
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = (0..d).map(|j| a.column(j).dot(&a.column(j)).sqrt()).collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Array1::from(sv)
}

/// Inverse principal square root of a symmetric PSD matrix, with eigenvalues
/// clamped from below before inversion so near-singular directions stay
/// bounded.
pub fn inv_sqrt_psd(a: &Array2<f64>, clamp: f64) -> Array2<f64> {
    let (vals, vecs) = sym_eigen(a);
    let d = a.nrows();
    let mut out = Array2::zeros((d, d));
    for k in 0..d {
        let lam = vals[k].max(clamp);
        let w = 1.0 / lam.sqrt();
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] += w * vecs[(i, k)] * vecs[(j, k)];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn eigen_of_two_by_two() {
        let a = arr2(&[[2.0, 1.0], [1.0, 2.0]]);
        let (vals, vecs) = sym_eigen(&a);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // A v = lambda v for each column
        for k in 0..2 {
            for i in 0..2 {
                let av: f64 = (0..2).map(|j| a[(i, j)] * vecs[(j, k)]).sum();
                assert!((av - vals[k] * vecs[(i, k)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let d = 8;
        let mut a = Array2::zeros((d, d));
        for i in 0..d {
            for j in i..d {
                let v: f64 = rng.random::<f64>() - 0.5;
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        let (vals, vecs) = sym_eigen(&a);
        for i in 0..d {
            for j in 0..d {
                let mut r = 0.0;
                for k in 0..d {
                    r += vecs[(i, k)] * vals[k] * vecs[(j, k)];
                }
                assert!((r - a[(i, j)]).abs() < 1e-9, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn singular_values_of_diagonal() {
        let x = arr2(&[[3.0, 0.0], [0.0, -2.0], [0.0, 0.0]]);
        let sv = singular_values(&x);
        assert!((sv[0] - 3.0).abs() < 1e-12);
        assert!((sv[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_values_match_gram_eigenvalues() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let x = Array2::from_shape_fn((10, 6), |_| rng.random::<f64>() - 0.5);
        let sv = singular_values(&x);
        let gram = x.t().dot(&x);
        let (evals, _) = sym_eigen(&gram);
        for k in 0..6 {
            assert!((sv[k] * sv[k] - evals[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn singular_values_wide_matrix_uses_transpose() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let x = Array2::from_shape_fn((4, 9), |_| rng.random::<f64>() - 0.5);
        let a = singular_values(&x);
        let b = singular_values(&x.t().to_owned());
        for k in 0..4 {
            assert!((a[k] - b[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn inv_sqrt_is_inverse_square_root() {
        let a = arr2(&[[4.0, 0.0], [0.0, 9.0]]);
        let r = inv_sqrt_psd(&a, 1e-12);
        assert!((r[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((r[(1, 1)] - 1.0 / 3.0).abs() < 1e-12);
        assert!(r[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn inv_sqrt_clamps_tiny_eigenvalues() {
        let a = arr2(&[[1e-12, 0.0], [0.0, 1.0]]);
        let r = inv_sqrt_psd(&a, 1e-4);
        assert!((r[(0, 0)] - 100.0).abs() < 1e-6);
    }
}
