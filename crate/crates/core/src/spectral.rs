//! Cyclic Jacobi eigensolver for small symmetric matrices and the singular
//! values derived from it. Reference path only: energies never go through here
//! in production, it exists to check `‖M‖²_F = Σσ²` and as the slow baseline.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const MAX_SWEEPS: usize = 64;

/// Eigenvalues of a symmetric matrix, descending.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    let n = m.rows();
    if n != m.cols() {
        return Err(Error::InvalidShape {
            name: "eigen".into(),
            reason: format!("{:?} is not square", m.shape()),
        });
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("eigensolver input".into()));
    }
    let mut a = m.as_slice().to_vec();
    let total: f64 = a.iter().map(|x| x * x).sum();
    let tol = total * (f64::EPSILON * f64::EPSILON);

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += 2.0 * a[p * n + q] * a[p * n + q];
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }

    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(eig)
}

/// Singular values (descending) from the eigenvalues of the smaller Gram matrix.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    let gram = if m.rows() <= m.cols() { m.row_gram() } else { m.col_gram() };
    Ok(symmetric_eigenvalues(&gram)?
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect())
}
