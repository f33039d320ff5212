//! Shared value types: symmetric matrix collections, orthogonal transforms,
//! and deterministic seed derivation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when validating that a matrix is orthogonal.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;

/// Relative tolerance used when validating that a matrix is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// A collection of N symmetric d×d matrices sharing one dimension.
///
/// This is the common currency between the sampling, block-diagonalization
/// and manifold-optimization stages. Constructors validate shape, symmetry
/// and finiteness once so downstream code can assume all three.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrixSet {
    dim: usize,
    mats: Vec<DMatrix<f64>>,
}

impl SymmetricMatrixSet {
    /// Build a set from matrices, checking squareness, a shared dimension,
    /// finiteness, and symmetry up to a relative tolerance.
    pub fn new(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        if mats.is_empty() {
            return Err(Error::EmptyInput("matrix set contains no matrices".into()));
        }
        let dim = mats[0].nrows();
        for (n, m) in mats.iter().enumerate() {
            if m.nrows() != m.ncols() {
                return Err(Error::InvalidArgument(format!(
                    "matrix {n} is {}x{}, not square",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.nrows() != dim {
                return Err(Error::DimensionMismatch {
                    context: format!("matrix {n} in set"),
                    expected: dim,
                    got: m.nrows(),
                });
            }
            let scale = m.amax().max(1.0);
            for i in 0..dim {
                for j in 0..i {
                    if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                        return Err(Error::InvalidArgument(format!(
                            "matrix {n} is not symmetric at ({i},{j}): {} vs {}",
                            m[(i, j)],
                            m[(j, i)]
                        )));
                    }
                }
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("matrix {n} in set")));
            }
        }
        Ok(Self { dim, mats })
    }

    /// Build a set without validation. For internal construction where the
    /// invariants hold by construction (e.g. symmetrized conjugations).
    pub fn from_unchecked(dim: usize, mats: Vec<DMatrix<f64>>) -> Self {
        debug_assert!(mats.iter().all(|m| m.nrows() == dim && m.ncols() == dim));
        Self { dim, mats }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn mats(&self) -> &[DMatrix<f64>] {
        &self.mats
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DMatrix<f64>> {
        self.mats.iter()
    }

    /// Conjugate every matrix: H ↦ UᵀHU. The result is re-symmetrized
    /// ((M+Mᵀ)/2) to remove floating-point asymmetry.
    pub fn conjugated(&self, u: &DMatrix<f64>) -> Result<Self> {
        if u.nrows() != self.dim || u.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "conjugation transform".into(),
                expected: self.dim,
                got: u.nrows(),
            });
        }
        let mats = self
            .mats
            .iter()
            .map(|h| {
                let m = u.transpose() * h * u;
                (&m + m.transpose()) * 0.5
            })
            .collect();
        Ok(Self {
            dim: self.dim,
            mats,
        })
    }

    /// Restrict every matrix to the principal block given by `indices`.
    pub fn principal_block(&self, indices: &[usize]) -> Result<Self> {
        for &i in indices {
            if i >= self.dim {
                return Err(Error::InvalidArgument(format!(
                    "block index {i} out of range for dimension {}",
                    self.dim
                )));
            }
        }
        let k = indices.len();
        let mats = self
            .mats
            .iter()
            .map(|h| DMatrix::from_fn(k, k, |i, j| h[(indices[i], indices[j])]))
            .collect();
        Ok(Self { dim: k, mats })
    }

    /// Entrywise mean of absolute values over the set: the matrix whose
    /// thresholded support defines the recovered sparsity pattern.
    pub fn mean_abs(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.dim, self.dim);
        for m in &self.mats {
            acc.zip_apply(m, |a, b| *a += b.abs());
        }
        acc / self.mats.len() as f64
    }

    /// sqrt(Σ_n ‖H_n‖_F²): the natural scale of the set, used to convert
    /// relative tolerances (commutator budgets, thresholds) into absolute ones.
    pub fn frobenius_scale(&self) -> f64 {
        self.mats
            .iter()
            .map(|m| m.norm_squared())
            .sum::<f64>()
            .sqrt()
    }
}

/// An orthogonal d×d matrix together with its determinant sign.
///
/// Wraps results that are meaningful only when orthogonal (vertex reductions,
/// block-diagonalizers, recovered sparsifying transforms). Construction
/// verifies ‖UᵀU − I‖ entrywise against [`ORTHOGONALITY_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalTransform {
    matrix: DMatrix<f64>,
    det_sign: i8,
}

impl OrthogonalTransform {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::InvalidArgument(format!(
                "orthogonal transform must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let d = matrix.nrows();
        if d == 0 {
            return Err(Error::EmptyInput("orthogonal transform of dimension 0".into()));
        }
        let gram = matrix.transpose() * &matrix;
        for i in 0..d {
            for j in 0..d {
                let target = if i == j { 1.0 } else { 0.0 };
                if (gram[(i, j)] - target).abs() > ORTHOGONALITY_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "matrix is not orthogonal: (UᵀU)[{i},{j}] = {}",
                        gram[(i, j)]
                    )));
                }
            }
        }
        let det_sign = if matrix.determinant() >= 0.0 { 1 } else { -1 };
        Ok(Self { matrix, det_sign })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            matrix: DMatrix::identity(d, d),
            det_sign: 1,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn det_sign(&self) -> i8 {
        self.det_sign
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Derive an independent 64-bit seed for a named sub-stream of a master seed.
///
/// Every stage that consumes randomness derives its own stream so that
/// changing one stage's draws never perturbs another's.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master ^ stream.rotate_left(17));
    // Burn one draw keyed by the stream index so (master, 0) and (master^0, ...)
    // collisions do not alias.
    let _: u64 = rng.gen();
    rng.gen::<u64>() ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Deterministic RNG used throughout: ChaCha8 seeded from a u64.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Serde-friendly dense matrix representation (row-major nested vectors).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixData(pub Vec<Vec<f64>>);

impl MatrixData {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixData(
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                .collect(),
        )
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let rows = self.0.len();
        if rows == 0 {
            return Err(Error::EmptyInput("matrix with zero rows".into()));
        }
        let cols = self.0[0].len();
        for (i, r) in self.0.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: format!("row {i} of serialized matrix"),
                    expected: cols,
                    got: r.len(),
                });
            }
        }
        Ok(DMatrix::from_fn(rows, cols, |i, j| self.0[i][j]))
    }
}

/// Serde-friendly vector representation.
pub fn vec_to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
