//! Thin singular value decomposition by one-sided Jacobi rotations.

// Index-based loops mirror the reference algorithm; keep them literal.
#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};

use super::Matrix;

/// Maximum number of Jacobi sweeps before declaring non-convergence.
const MAX_SWEEPS: usize = 60;

/// Result of [`svd`]: `m = u * diag(sigma) * v^T` with `u` (rows x k) and
/// `v` (cols x k) having orthonormal columns, `k = min(rows, cols)`, and
/// `sigma` nonincreasing.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    /// Reconstructs `u * diag(sigma) * v^T`.
    pub fn reconstruct(&self) -> Matrix {
        let k = self.sigma.len();
        Matrix::from_fn(self.u.rows(), self.v.rows(), |i, j| {
            (0..k)
                .map(|r| self.u.get(i, r) * self.sigma[r] * self.v.get(j, r))
                .sum()
        })
    }

    /// Count of singular values above `max(rows, cols) * eps * sigma_max`.
    pub fn numerical_rank(&self) -> usize {
        let smax = self.sigma.first().copied().unwrap_or(0.0);
        let dims = self.u.rows().max(self.v.rows()) as f64;
        let thresh = dims * f64::EPSILON * smax;
        self.sigma.iter().filter(|&&s| s > thresh).count()
    }
}

/// Thin SVD of a dense matrix.
///
/// One-sided Jacobi on the side with fewer columns: rotations orthogonalize
/// column pairs until all normalized inner products fall below machine
/// precision, after which column norms are the singular values. Fails with
/// [`Error::NonConvergence`] if the sweep cap is hit.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidData("svd of an empty matrix".into()));
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose())?;
        Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        })
    }
}

fn svd_tall(m: &Matrix) -> Result<Svd> {
    let rows = m.rows();
    let cols = m.cols();
    debug_assert!(rows >= cols);

    // Column-major working copy: a[j] is the j-th column of m.
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.col(j)).collect();
    let mut v = Matrix::identity(cols);

    let tol = f64::EPSILON;
    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..rows {
                    alpha += a[p][i] * a[p][i];
                    beta += a[q][i] * a[q][i];
                    gamma += a[p][i] * a[q][i];
                }
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let ap = a[p][i];
                    let aq = a[q][i];
                    a[p][i] = c * ap - s * aq;
                    a[q][i] = s * ap + c * aq;
                }
                for i in 0..cols {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            op: "jacobi svd",
            iterations: MAX_SWEEPS,
        });
    }

    // Column norms are the singular values; sort them nonincreasing.
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = a
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = sigma.first().copied().unwrap_or(0.0);
    // Columns whose norm is at rounding level carry no usable direction.
    let negligible = smax * f64::EPSILON * (rows.max(cols) as f64) * 8.0;

    let mut u = Matrix::zeros(rows, cols);
    let mut degenerate = Vec::new();
    for (r, &j) in order.iter().enumerate() {
        if sigma[r] > negligible && sigma[r] > 0.0 {
            for i in 0..rows {
                u.set(i, r, a[j][i] / sigma[r]);
            }
        } else {
            degenerate.push(r);
        }
    }
    if !degenerate.is_empty() {
        complete_orthonormal(&mut u, &degenerate);
    }

    let v_sorted = Matrix::from_fn(cols, cols, |i, r| v.get(i, order[r]));
    Ok(Svd {
        u,
        sigma,
        v: v_sorted,
    })
}

/// Fills the listed columns of `u` with unit vectors orthogonal to all other
/// columns (Gram-Schmidt against the canonical basis).
fn complete_orthonormal(u: &mut Matrix, fill: &[usize]) {
    let rows = u.rows();
    let cols = u.cols();
    let mut next_basis = 0usize;
    for &target in fill {
        'candidates: while next_basis < rows {
            let mut w = vec![0.0; rows];
            w[next_basis] = 1.0;
            next_basis += 1;
            for j in 0..cols {
                if fill.contains(&j) && j >= target {
                    continue;
                }
                let dot: f64 = (0..rows).map(|i| w[i] * u.get(i, j)).sum();
                for (i, wi) in w.iter_mut().enumerate() {
                    *wi -= dot * u.get(i, j);
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for (i, wi) in w.iter().enumerate() {
                    u.set(i, target, wi / norm);
                }
                break 'candidates;
            }
        }
    }
}
