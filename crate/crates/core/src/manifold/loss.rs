//! Smoothed sparsity losses on conjugated matrix sets.
//!
//! For a rotation `U` and symmetric matrices `H_1..H_N`, write
//! `M_n = U^T H_n U` and `q(i,j) = sum_n M_n(i,j)^2`. The smoothed loss is
//!
//! ```text
//! loss(U) = n_out * sum_{(i,j) in slots} sqrt(n_in * q(i,j) + epsilon)
//! ```
//!
//! where `slots` is either every entry or the off-diagonal entries only, and
//! the pair `(n_out, n_in)` is `(1, 1/N)` (mean over the set) or
//! `(1/sqrt(N), 1)` (scale by the square root of the set size). As
//! `epsilon -> 0` each summand tends to the l2 norm across the set of one
//! matrix entry, so the loss tends to a group-l0 surrogate.
//!
//! [`half_power_loss`] is a steeper, non-smooth alternative used only for
//! ranking candidates, never for gradients.

use nalgebra::DMatrix;

use crate::types::SymmetricMatrixSet;

/// How the loss is scaled by the number of matrices in the set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Average the squared entries over the set before the square root.
    MeanOverN,
    /// Sum squared entries, divide the final loss by `sqrt(N)`.
    InvSqrtCount,
}

/// Parameters of the smoothed sparsity loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Smoothing parameter inside the square root; must be positive for the
    /// gradient to exist everywhere.
    pub epsilon: f64,
    /// Whether diagonal entries count as sparsity slots.
    pub include_diagonal: bool,
    pub normalization: Normalization,
}

impl Default for LossConfig {
    /// Off-diagonal slots averaged over the set: the variant whose minimizers
    /// are characterized by joint block-diagonalizability.
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            include_diagonal: false,
            normalization: Normalization::MeanOverN,
        }
    }
}

impl LossConfig {
    /// All-entry variant scaled by `1/sqrt(N)`, the configuration used by the
    /// benchmark experiments (diagonal entries are penalized too).
    pub fn diagonal_inclusive() -> Self {
        Self {
            epsilon: 1e-8,
            include_diagonal: true,
            normalization: Normalization::InvSqrtCount,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// `(n_out, n_in)` scaling factors for a set of `n` matrices.
    pub(crate) fn scalings(&self, n: usize) -> (f64, f64) {
        match self.normalization {
            Normalization::MeanOverN => (1.0, 1.0 / n as f64),
            Normalization::InvSqrtCount => (1.0 / (n as f64).sqrt(), 1.0),
        }
    }
}

/// Entrywise sum of squares across the set: `q(i,j) = sum_n H_n(i,j)^2`.
pub fn entrywise_square_sum(mats: &SymmetricMatrixSet) -> DMatrix<f64> {
    let d = mats.dim();
    let mut q: DMatrix<f64> = DMatrix::zeros(d, d);
    for h in mats.mats() {
        q.zip_apply(h, |acc, v| *acc += v * v);
    }
    q
}

/// The smoothed sparsity loss of `U^T H_n U` over the set.
pub fn sparsity_loss(mats: &SymmetricMatrixSet, u: &DMatrix<f64>, cfg: &LossConfig) -> f64 {
    let conj = conjugate_all(mats, u);
    sparsity_loss_of_conjugated(&conj, mats.len(), cfg)
}

fn sparsity_loss_of_conjugated(conj: &[DMatrix<f64>], n: usize, cfg: &LossConfig) -> f64 {
    let d = conj.first().map_or(0, |m| m.nrows());
    let (n_out, n_in) = cfg.scalings(n);
    let mut q: DMatrix<f64> = DMatrix::zeros(d, d);
    for m in conj {
        q.zip_apply(m, |acc, v| *acc += v * v);
    }
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i == j && !cfg.include_diagonal {
                continue;
            }
            total += (n_in * q[(i, j)] + cfg.epsilon).sqrt();
        }
    }
    n_out * total
}

/// Sum of fourth roots of the entrywise square sums, squared:
///
/// ```text
/// (1/sqrt(N)) * ( sum_{i,j} q(i,j)^(1/4) )^2
/// ```
///
/// This penalizes spread-out mass much harder than [`sparsity_loss`]; it is
/// the ranking criterion for grid search and restart selection.
pub fn half_power_loss(mats: &SymmetricMatrixSet, u: &DMatrix<f64>) -> f64 {
    let conj = conjugate_all(mats, u);
    let d = mats.dim();
    let mut q: DMatrix<f64> = DMatrix::zeros(d, d);
    for m in &conj {
        q.zip_apply(m, |acc, v| *acc += v * v);
    }
    let sum: f64 = q.iter().map(|&v| v.max(0.0).powf(0.25)).sum();
    sum * sum / (mats.len() as f64).sqrt()
}

/// Euclidean (flat-space) gradient of [`sparsity_loss`] with respect to `U`.
///
/// With `W_n = Omega .* M_n` and `Omega(i,j)` the derivative of the loss in
/// `q(i,j)`, the gradient is `sum_n 2 (H_n U W_n^T + H_n^T U W_n)`; slots at
/// exactly zero with `epsilon = 0` get weight zero.
pub fn euclidean_gradient(
    mats: &SymmetricMatrixSet,
    u: &DMatrix<f64>,
    cfg: &LossConfig,
) -> DMatrix<f64> {
    let d = mats.dim();
    let (n_out, n_in) = cfg.scalings(mats.len());
    let conj = conjugate_all(mats, u);

    let mut q: DMatrix<f64> = DMatrix::zeros(d, d);
    for m in &conj {
        q.zip_apply(m, |acc, v| *acc += v * v);
    }
    let mut omega = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i == j && !cfg.include_diagonal {
                continue;
            }
            let den = (n_in * q[(i, j)] + cfg.epsilon).sqrt();
            if den > 0.0 {
                omega[(i, j)] = n_out * n_in / (2.0 * den);
            }
        }
    }

    let mut grad = DMatrix::zeros(d, d);
    for (h, m) in mats.mats().iter().zip(&conj) {
        let w = omega.component_mul(m);
        grad += h * u * w.transpose();
        grad += h.transpose() * u * &w;
    }
    2.0 * grad
}

fn conjugate_all(mats: &SymmetricMatrixSet, u: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    mats.mats().iter().map(|h| u.tr_mul(&(h * u))).collect()
}
