//! Small dense solvers shared by filter design, LDA, and PCA.

use crate::error::{Error, Result};

/// Solves A x = b by Gaussian elimination with partial pivoting.
/// `a` is row-major n x n.
pub fn solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    if a.len() != n * n || b.len() != n {
        return Err(Error::dim(format!(
            "solve needs {}x{} matrix and length-{} rhs, got {} and {}",
            n,
            n,
            n,
            a.len(),
            b.len()
        )));
    }
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if m[row * n + col].abs() > m[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if m[pivot * n + col].abs() < 1e-300 {
            return Err(Error::numeric(format!("singular system at column {col}")));
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            x.swap(col, pivot);
        }
        let inv = 1.0 / m[col * n + col];
        for row in (col + 1)..n {
            let factor = m[row * n + col] * inv;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col];
        for k in (col + 1)..n {
            acc -= m[col * n + k] * x[k];
        }
        x[col] = acc / m[col * n + col];
    }
    Ok(x)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), sorted descending.
/// Deterministic: fixed sweep order, fixed iteration cap.
pub fn eigh(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::dim(format!("eigh needs {}x{}, got len {}", n, n, a.len())));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                // Stable tangent of the rotation angle.
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
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
    order.sort_by(|&i, &j| {
        m[j * n + j]
            .partial_cmp(&m[i * n + i])
            .expect("eigenvalues are finite")
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut eigenvectors = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        // Sign convention: largest-magnitude component is positive.
        let mut lead = 0;
        for k in 1..n {
            if v[k * n + old_col].abs() > v[lead * n + old_col].abs() {
                lead = k;
            }
        }
        let sign = if v[lead * n + old_col] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            eigenvectors[k * n + new_col] = sign * v[k * n + old_col];
        }
    }
    Ok((eigenvalues, eigenvectors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_recovers_known_solution() {
        // [[2,1],[1,3]] x = [5,10] -> x = [1,3]
        let x = solve(&[2.0, 1.0, 1.0, 3.0], &[5.0, 10.0], 2).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn solve_rejects_singular() {
        let err = solve(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0], 2).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn eigh_diagonalizes_symmetric_matrix() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1.
        let (vals, vecs) = eigh(&[2.0, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // First eigenvector ~ (1,1)/sqrt(2).
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        assert!((vecs[0] - inv_sqrt2).abs() < 1e-10);
        assert!((vecs[2] - inv_sqrt2).abs() < 1e-10);
    }

    #[test]
    fn eigh_reconstructs_random_symmetric_matrices() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let n = 5;
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..=i {
                    let v = rng.gen::<f64>() * 2.0 - 1.0;
                    a[i * n + j] = v;
                    a[j * n + i] = v;
                }
            }
            let (vals, vecs) = eigh(&a, n).unwrap();
            // Check A v_k = lambda_k v_k column by column.
            for k in 0..n {
                for i in 0..n {
                    let mut av = 0.0;
                    for j in 0..n {
                        av += a[i * n + j] * vecs[j * n + k];
                    }
                    assert!(
                        (av - vals[k] * vecs[i * n + k]).abs() < 1e-9,
                        "eigenpair {k} residual"
                    );
                }
            }
        }
    }
}
