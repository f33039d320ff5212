//! Small linear-algebra helpers shared across modules: Haar-distributed
//! rotations, orthonormal basis completion, and span orthonormalization
//! for matrix sets.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::types::SymmetricMatrixSet;

/// Sample an orthogonal matrix from the Haar measure on O(d), then fix the
/// determinant to +1 by flipping the sign of the first column if needed.
///
/// Uses QR of a standard Gaussian matrix with the sign convention
/// diag(R) > 0, which makes the Q factor Haar-distributed.
pub fn haar_rotation<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(d >= 1, "haar_rotation requires d >= 1");
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    if q.determinant() < 0.0 {
        for i in 0..d {
            q[(i, 0)] = -q[(i, 0)];
        }
    }
    q
}

/// Extend a set of orthonormal columns (d×m, m ≤ d) to a full orthonormal
/// basis of R^d by Gram–Schmidt against the canonical basis. The input
/// columns are preserved exactly as the first m output columns.
pub fn complete_orthonormal_basis(partial: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = partial.nrows();
    let m = partial.ncols();
    if m > d {
        return Err(Error::InvalidArgument(format!(
            "cannot complete {m} columns in dimension {d}"
        )));
    }
    let mut cols: Vec<DVector<f64>> = (0..m).map(|j| partial.column(j).into_owned()).collect();
    for k in 0..d {
        if cols.len() == d {
            break;
        }
        let mut v = DVector::zeros(d);
        v[k] = 1.0;
        // Two rounds of classical Gram–Schmidt for numerical stability.
        for _ in 0..2 {
            for c in &cols {
                let proj = c.dot(&v);
                v -= c * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
    }
    if cols.len() != d {
        return Err(Error::InvalidArgument(
            "failed to complete orthonormal basis (input columns not orthonormal?)".into(),
        ));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// An orthonormal basis of (an approximation to) the span of a symmetric
/// matrix set, with the singular values of the vectorized stack.
#[derive(Debug, Clone)]
pub struct SpanBasis {
    /// Basis matrices: symmetric, pairwise orthonormal in the Frobenius
    /// inner product, spanning the directions with singular value above
    /// the threshold.
    pub basis: SymmetricMatrixSet,
    /// All singular values of the d² × N stack, descending.
    pub singular_values: Vec<f64>,
    /// Absolute threshold applied: tau_rel · (largest singular value).
    pub tau_abs: f64,
}

/// Orthonormalize the span of a symmetric matrix set.
///
/// Vectorizes the N matrices into a d²×N stack, takes its SVD, and keeps the
/// left singular vectors with singular value strictly above
/// `tau_rel · σ_max`, reshaped to d×d and re-symmetrized. Working with this
/// reduced basis instead of the raw set caps the per-evaluation cost of the
/// sparsity losses at the span dimension rather than the sample count.
pub fn span_orthonormal_basis(set: &SymmetricMatrixSet, tau_rel: f64) -> Result<SpanBasis> {
    if tau_rel < 0.0 || !tau_rel.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "tau_rel must be a finite nonnegative real, got {tau_rel}"
        )));
    }
    let d = set.dim();
    let n = set.len();
    let mut stack = DMatrix::zeros(d * d, n);
    for (k, m) in set.iter().enumerate() {
        for j in 0..d {
            for i in 0..d {
                stack[(j * d + i, k)] = m[(i, j)];
            }
        }
    }
    let svd = stack.svd(true, false);
    let u = svd
        .u
        .as_ref()
        .expect("svd with compute_u=true always yields u");
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let tau_abs = tau_rel * sigma_max;

    let mut basis = Vec::new();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tau_abs && s > 0.0 {
            let mut m = DMatrix::zeros(d, d);
            for j in 0..d {
                for i in 0..d {
                    m[(i, j)] = u[(j * d + i, k)];
                }
            }
            // Singular vectors of a stack of symmetric matrices are symmetric
            // up to roundoff; symmetrize and renormalize.
            let mut sym = (&m + m.transpose()) * 0.5;
            let norm = sym.norm();
            if norm > 0.0 {
                sym /= norm;
            }
            basis.push(sym);
        }
    }
    if basis.is_empty() {
        return Err(Error::EmptyInput(
            "span orthonormalization kept no directions (all singular values at or below threshold)"
                .into(),
        ));
    }
    Ok(SpanBasis {
        basis: SymmetricMatrixSet::from_unchecked(d, basis),
        singular_values: sv,
        tau_abs,
    })
}

/// Dimension of span{H_1, …, H_N} at relative threshold `tau_rel`.
pub fn span_dimension(set: &SymmetricMatrixSet, tau_rel: f64) -> usize {
    match span_orthonormal_basis(set, tau_rel) {
        Ok(b) => b.basis.len(),
        Err(_) => 0,
    }
}

/// Numerical rank of a single matrix at relative threshold `tau_rel`.
pub fn matrix_rank(m: &DMatrix<f64>, tau_rel: f64) -> usize {
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|&&s| s > tau_rel * max)
        .count()
}

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymmetricEigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Orthogonal; column `i` is a unit eigenvector for `eigenvalues[i]`.
    pub eigenvectors: DMatrix<f64>,
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
///
/// nalgebra's `SymmetricEigen` can return vectors that are not eigenvectors
/// at all (residual ~1e-1) on matrices with repeated eigenvalues, which the
/// matrix sets here produce constantly — near-commutant elements have one
/// eigenvalue per block. Jacobi iteration is unconditionally convergent on
/// symmetric input and its accuracy does not depend on multiplicities.
///
/// The input is symmetrized; asymmetry is the caller's responsibility.
/// Cost is O(n^3) per sweep with ~8 sweeps typical, fine for the n ≤ a few
/// hundred this crate works with.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> Result<SymmetricEigenDecomposition> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "symmetric eigendecomposition".into(),
            expected: n,
            got: a.ncols(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("eigendecomposition of a 0x0 matrix".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "eigendecomposition input has non-finite entries".into(),
        ));
    }
    let mut m = (a + a.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = m.norm();
    let off = |m: &DMatrix<f64>| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in 0..n {
                if p != q {
                    s += m[(p, q)] * m[(p, q)];
                }
            }
        }
        s.sqrt()
    };
    let tol = 1e-15 * scale;
    let mut converged = scale == 0.0;
    for _sweep in 0..60 {
        if off(&m) <= tol {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(p, k)] = m[(k, p)];
                    m[(k, q)] = s * akp + c * akq;
                    m[(q, k)] = m[(k, q)];
                }
                m[(p, p)] -= t * apq;
                m[(q, q)] += t * apq;
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && off(&m) > tol {
        return Err(Error::OptimizationFailed(format!(
            "jacobi eigensolver did not reach off-diagonal tolerance {tol:.3e} in 60 sweeps"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        eigenvectors
            .column_mut(new_col)
            .copy_from(&v.column(old_col));
    }
    Ok(SymmetricEigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Maximal absolute entry of UᵀU − I: how far U is from orthogonality.
pub fn orthogonality_defect(u: &DMatrix<f64>) -> f64 {
    let d = u.ncols();
    let gram = u.transpose() * u;
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}
