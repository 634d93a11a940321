//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest matrix order accepted by [`sym_eig`].
pub const MAX_ORDER: usize = 4096;

const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone)]
pub struct EigenResult {
    /// Sorted in descending order.
    pub eigenvalues: Vec<f64>,
    /// `n x n`; column `i` belongs to `eigenvalues[i]`. Each column's largest
    /// magnitude component is positive.
    pub eigenvectors: Tensor,
}

impl EigenResult {
    pub fn vector(&self, i: usize) -> Vec<f64> {
        let n = self.eigenvalues.len();
        (0..n).map(|r| self.eigenvectors.data()[r * n + i]).collect()
    }
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Eigenvalues and orthonormal eigenvectors of a symmetric matrix.
///
/// Sweeps over all `(p, q)` pairs until the off-diagonal Frobenius norm is at
/// most `1e-12` times the Frobenius norm of the input.
pub fn sym_eig(a: &Tensor) -> Result<EigenResult> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::Dimension(format!(
            "sym_eig needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    let n = a.shape()[0];
    if n > MAX_ORDER {
        return Err(Error::Validation(format!(
            "matrix order {n} exceeds the cap of {MAX_ORDER}"
        )));
    }
    if !a.is_finite() {
        return Err(Error::Validation("matrix has non-finite entries".into()));
    }
    let tol_sym = 1e-12 * a.max_abs().max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            let d = (a.get(&[i, j]) - a.get(&[j, i])).abs();
            if d > tol_sym {
                return Err(Error::Validation(format!(
                    "matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {d:e}"
                )));
            }
        }
    }

    let mut m = a.data().to_vec();
    // Symmetrize exactly so rotations see one value per pair.
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    let mut v = Tensor::identity(n).into_data();
    let threshold = 1e-12 * frobenius(&m);

    let mut sweeps = 0;
    while off_diagonal_norm(&m, n) > threshold {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Validation(format!(
                "Jacobi iteration did not converge in {MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, n, p, q, c, s);
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        let mut big = 0.0f64;
        let mut sign = 1.0;
        for r in 0..n {
            let x = v[r * n + src];
            if x.abs() > big {
                big = x.abs();
                sign = x.signum();
            }
        }
        for r in 0..n {
            vectors[r * n + col] = sign * v[r * n + src];
        }
    }
    Ok(EigenResult {
        eigenvalues,
        eigenvectors: Tensor::new(&[n, n], vectors)?,
    })
}

// Applies J^T M J for the Givens rotation in the (p, q) plane, zeroing m[p][q].
fn rotate(m: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..n {
        let mkp = m[k * n + p];
        let mkq = m[k * n + q];
        m[k * n + p] = c * mkp - s * mkq;
        m[k * n + q] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[p * n + k];
        let mqk = m[q * n + k];
        m[p * n + k] = c * mpk - s * mqk;
        m[q * n + k] = s * mpk + c * mqk;
    }
    m[p * n + q] = 0.0;
    m[q * n + p] = 0.0;
}
