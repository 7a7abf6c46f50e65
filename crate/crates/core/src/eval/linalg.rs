//! Symmetric eigendecomposition (cyclic Jacobi) and the PSD matrix square
//! root trace needed by the Frechet distance.

use ndarray::Array2;

use super::EvalError;

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method.
///
/// Desk-scale feature dimensions (tens to a few hundred) keep the O(d^3)
/// sweeps cheap, and the rotations are deterministic.
pub fn sym_eigenvalues(matrix: &Array2<f64>) -> Result<Vec<f64>, EvalError> {
    let (a, _) = jacobi(matrix, false)?;
    Ok(a)
}

/// Full symmetric eigendecomposition: `(eigenvalues, eigenvectors)` with
/// eigenvectors in columns.
pub fn sym_eigen(matrix: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>), EvalError> {
    let (vals, vecs) = jacobi(matrix, true)?;
    Ok((vals, vecs.expect("requested vectors")))
}

fn jacobi(
    matrix: &Array2<f64>,
    want_vectors: bool,
) -> Result<(Vec<f64>, Option<Array2<f64>>), EvalError> {
    let n = matrix.nrows();
    assert_eq!(n, matrix.ncols(), "matrix must be square");
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite("eigendecomposition input".into()));
    }
    let mut a = matrix.clone();
    // enforce exact symmetry before rotating
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = m;
            a[[j, i]] = m;
        }
    }
    let mut vectors = want_vectors.then(|| Array2::<f64>::eye(n));
    let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let tol = 1e-14 * scale;
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[[i, j]] * a[[i, j]];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                if let Some(v) = vectors.as_mut() {
                    for k in 0..n {
                        let vkp = v[[k, p]];
                        let vkq = v[[k, q]];
                        v[[k, p]] = c * vkp - s * vkq;
                        v[[k, q]] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    Ok(((0..n).map(|i| a[[i, i]]).collect(), vectors))
}

/// Symmetric PSD square root via eigendecomposition, clamping small negative
/// eigenvalues (below `1e-8 * max`) to zero.
pub fn sqrt_psd(matrix: &Array2<f64>) -> Result<Array2<f64>, EvalError> {
    let (vals, vecs) = sym_eigen(matrix)?;
    let max = vals.iter().cloned().fold(0.0f64, f64::max);
    let n = matrix.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    for (idx, &lambda) in vals.iter().enumerate() {
        let clamped = if lambda < 1e-8 * max.max(1e-300) {
            0.0
        } else {
            lambda
        };
        let root = clamped.sqrt();
        if root == 0.0 {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += root * vecs[[i, idx]] * vecs[[j, idx]];
            }
        }
    }
    Ok(out)
}

/// `Tr((A B)^{1/2})` for symmetric PSD `A`, `B`: the eigenvalues of `A B`
/// equal those of the symmetric `sqrt(A) B sqrt(A)`, whose square roots are
/// summed after clamping.
pub fn trace_sqrt_product(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, EvalError> {
    let sqrt_a = sqrt_psd(a)?;
    let inner = sqrt_a.dot(b).dot(&sqrt_a);
    let vals = sym_eigenvalues(&inner)?;
    let max = vals.iter().cloned().fold(0.0f64, f64::max);
    Ok(vals
        .iter()
        .map(|&v| if v < 1e-8 * max.max(1e-300) { 0.0 } else { v.sqrt() })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eigenvalues_of_known_matrix() {
        // [[2, 1], [1, 2]] has eigenvalues 1 and 3
        let m = array![[2.0, 1.0], [1.0, 2.0]];
        let mut vals = sym_eigenvalues(&m).unwrap();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let m = array![
            [4.0, 1.0, 0.5],
            [1.0, 3.0, -0.2],
            [0.5, -0.2, 1.5],
        ];
        let (vals, vecs) = sym_eigen(&m).unwrap();
        let mut rebuilt = Array2::<f64>::zeros((3, 3));
        for (idx, &lambda) in vals.iter().enumerate() {
            for i in 0..3 {
                for j in 0..3 {
                    rebuilt[[i, j]] += lambda * vecs[[i, idx]] * vecs[[j, idx]];
                }
            }
        }
        for (a, b) in rebuilt.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn sqrt_psd_squares_back() {
        let m = array![[2.0, 0.5], [0.5, 1.0]];
        let r = sqrt_psd(&m).unwrap();
        let sq = r.dot(&r);
        for (a, b) in sq.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn trace_sqrt_of_identity_product() {
        let eye = Array2::<f64>::eye(4);
        let tr = trace_sqrt_product(&eye, &eye).unwrap();
        assert!((tr - 4.0).abs() < 1e-10);
    }

    #[test]
    fn trace_sqrt_diagonal_case() {
        // diagonal A, B: Tr((AB)^{1/2}) = sum sqrt(a_i b_i)
        let a = Array2::from_diag(&array![1.0, 4.0, 9.0]);
        let b = Array2::from_diag(&array![0.25, 1.0, 4.0]);
        let tr = trace_sqrt_product(&a, &b).unwrap();
        let expect = (1.0f64 * 0.25).sqrt() + (4.0f64 * 1.0).sqrt() + (9.0f64 * 4.0).sqrt();
        assert!((tr - expect).abs() < 1e-10, "{tr} vs {expect}");
    }

    #[test]
    fn tiny_negative_eigenvalues_clamp_to_zero() {
        // rank-deficient covariance: one eigenvalue is ~0 and may round
        // slightly negative
        let m = array![[1.0, 1.0], [1.0, 1.0]];
        let r = sqrt_psd(&m).unwrap();
        let sq = r.dot(&r);
        for (a, b) in sq.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
