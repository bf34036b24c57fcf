//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Each sweep visits every superdiagonal pair `(p, q)` and rotates the
//! offending entry to zero; off-diagonal mass shrinks quadratically, so a
//! handful of sweeps suffices for the small dense matrices the clustering
//! pipeline produces. Deterministic: no pivoting choices depend on runtime
//! state.

use ndarray::Array2;

use crate::{Error, Result};

/// Absolute off-diagonal threshold below which an entry counts as zero.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Upper bound on full sweeps before giving up.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues in ascending order with matching eigenvectors as columns:
/// `vectors.column(k)` belongs to `values[k]`.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Array2<f64>,
}

/// Decomposes a symmetric matrix. Symmetry is checked up to a scaled
/// tolerance; anything further off is a caller bug, not noise.
pub fn jacobi_eigen(a: &Array2<f64>, tol: f64, max_sweeps: usize) -> Result<Eigen> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::config(format!(
            "eigendecomposition needs a non-empty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-9 * scale {
                return Err(Error::config(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    a[[i, j]],
                    a[[j, i]]
                )));
            }
        }
    }

    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);

    for sweep in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol {
                    continue;
                }
                rotated = true;

                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                // Smaller-magnitude root of t^2 + 2*theta*t - 1 = 0 keeps the
                // rotation angle below 45 degrees, which is what guarantees
                // monotone off-diagonal decay.
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                m[[p, p]] = app - t * apq;
                m[[q, q]] = aqq + t * apq;
                m[[p, q]] = 0.0;
                m[[q, p]] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = m[[i, p]];
                        let aiq = m[[i, q]];
                        m[[i, p]] = c * aip - s * aiq;
                        m[[p, i]] = m[[i, p]];
                        m[[i, q]] = s * aip + c * aiq;
                        m[[q, i]] = m[[i, q]];
                    }
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
        if !rotated {
            break;
        }
        if sweep == max_sweeps - 1 {
            log::warn!("jacobi eigensolver did not fully converge in {max_sweeps} sweeps");
        }
    }

    // Sort ascending by eigenvalue, index as the deterministic tie-break.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap().then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| m[[i, i]]).collect();
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (new_col, &old_col) in order.iter().enumerate() {
        vectors.column_mut(new_col).assign(&v.column(old_col));
    }
    Ok(Eigen { values, vectors })
}
