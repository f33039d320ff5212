//! Error-controlled joint block diagonalization of a symmetric matrix set.
//!
//! A set {H_1..H_N} is jointly block-diagonalizable by an orthogonal U
//! exactly when a non-trivial matrix commutes with every H_n. The
//! *commutant operator* `T = sum_n T_n^T T_n`, with `T_n` the matrix
//! representation of `A -> A H_n - H_n A`, is positive semidefinite and its
//! kernel is the joint commutant; eigenvectors with eigenvalue below
//! `delta^2` are matrices whose commutators with the whole set have total
//! squared Frobenius norm at most `delta^2`.
//!
//! Diagonalizing a random element of that near-kernel yields a basis in
//! which all H_n are (almost) block diagonal; with probability one over the
//! random element, the resulting structure is the finest one achievable at
//! tolerance `delta`.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graphs::{connected_components, BlockStructure, SparsityPattern};
use crate::linalg::symmetric_eigen;
use crate::types::{rng_from_seed, OrthogonalTransform, SymmetricMatrixSet};

/// Largest supported operator side (`d^2`); the commutant operator is
/// eigendecomposed densely.
pub const MAX_OPERATOR_DIM: usize = 4096;

/// Relative gap factor deciding where the sorted eigenvalues of the random
/// commutant element are cut into blocks.
pub const GAP_GAMMA: f64 = 1e-3;

/// Blocks whose mutual off-block entries exceed `MERGE_FACTOR * delta` are
/// merged: an eigenvalue cut that the data itself contradicts is treated as
/// accidental near-degeneracy of the random element.
pub const MERGE_FACTOR: f64 = 10.0;

/// Full spectrum of the commutant operator.
#[derive(Debug, Clone)]
pub struct CommutantSpectrum {
    /// Ascending; all `>= -1e-10` up to round-off (the operator is PSD).
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors reshaped to d x d matrices (orthonormal as vectors),
    /// in the same order as `eigenvalues`.
    pub eigenmatrices: Vec<DMatrix<f64>>,
}

impl CommutantSpectrum {
    /// Number of eigenvalues strictly below `delta^2`.
    pub fn near_kernel_dim(&self, delta: f64) -> usize {
        self.eigenvalues
            .iter()
            .take_while(|&&v| v < delta * delta)
            .count()
    }
}

/// Result of [`error_controlled_blockdiag`].
#[derive(Debug, Clone)]
pub struct BlockDiagResult {
    pub u: OrthogonalTransform,
    /// Contiguous groups in the conjugated coordinates, canonically ordered
    /// (size descending, then smallest index).
    pub structure: BlockStructure,
    /// `max_n max_{(i,j) cross-block} |(U^T H_n U)_(i,j)|`.
    pub off_block_residual: f64,
    /// Consecutive differences of the sorted eigenvalues of the random
    /// commutant element, as used for the block cuts.
    pub eigen_gaps: Vec<f64>,
    /// Dimension of the near-kernel of the commutant operator at `delta`.
    pub kernel_dim: usize,
}

/// Assemble `T = sum_n (H_n (x) I - I (x) H_n)^2` and return its full
/// spectrum. Using `(A (x) B)(C (x) D) = AC (x) BD`, the operator equals
/// `S (x) I + I (x) S - 2 sum_n H_n (x) H_n` with `S = sum_n H_n^2`,
/// which avoids materializing the N intermediate commutator operators.
pub fn commutant_operator(h: &SymmetricMatrixSet) -> Result<CommutantSpectrum> {
    let d = h.dim();
    let d2 = d * d;
    if d2 > MAX_OPERATOR_DIM {
        return Err(Error::TooLarge {
            context: "commutant operator side (d^2)".into(),
            got: d2,
            limit: MAX_OPERATOR_DIM,
        });
    }
    let mut s: DMatrix<f64> = DMatrix::zeros(d, d);
    let mut cross: DMatrix<f64> = DMatrix::zeros(d2, d2);
    for m in h.mats() {
        s += m * m;
        cross += m.kronecker(m);
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let t = s.kronecker(&eye) + eye.kronecker(&s) - 2.0 * cross;

    let eig = symmetric_eigen(&t)?;
    let eigenmatrices: Vec<DMatrix<f64>> = (0..d2)
        .map(|i| DMatrix::from_column_slice(d, d, eig.eigenvectors.column(i).as_slice()))
        .collect();
    Ok(CommutantSpectrum {
        eigenvalues: eig.eigenvalues,
        eigenmatrices,
    })
}

/// Find an orthogonal `U` making every `U^T H_n U` block diagonal up to
/// entries controlled by `delta`, with the finest block structure the
/// tolerance supports.
///
/// `delta` is an absolute bound on the total commutator norm of admitted
/// near-commutant directions; callers typically scale it by the Frobenius
/// norm of the set. Deterministic given `seed`.
pub fn error_controlled_blockdiag(
    h: &SymmetricMatrixSet,
    delta: f64,
    seed: u64,
) -> Result<BlockDiagResult> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "block diagonalization tolerance must be positive, got {delta}"
        )));
    }
    let d = h.dim();
    let spectrum = commutant_operator(h)?;
    let kernel_dim = spectrum.near_kernel_dim(delta);
    if kernel_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "delta too small: no commutant direction has eigenvalue below delta^2 = {:.3e} \
             (the identity always commutes; its numerical eigenvalue sets a floor)",
            delta * delta
        )));
    }

    // Random element of the near-kernel, coefficients uniform on the sphere.
    let mut rng = rng_from_seed(seed);
    let mut c: Vec<f64> = (0..kernel_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut c {
            *v /= norm;
        }
    }
    let mut w: DMatrix<f64> = DMatrix::zeros(d, d);
    for (ck, vk) in c.iter().zip(&spectrum.eigenmatrices) {
        w += *ck * vk;
    }
    let w = (&w + w.transpose()) * 0.5;

    // Eigenvalues of the commutant element cluster by block.
    let eig = symmetric_eigen(&w)?;
    let mu = eig.eigenvalues;
    let u_sorted = eig.eigenvectors;

    let eigen_gaps: Vec<f64> = mu.windows(2).map(|w| w[1] - w[0]).collect();
    let gap_threshold = GAP_GAMMA * (mu[d - 1] - mu[0]).abs().max(1.0) / d as f64;
    let mut groups: Vec<Vec<usize>> = vec![vec![0]];
    for (i, &gap) in eigen_gaps.iter().enumerate() {
        if gap > gap_threshold {
            groups.push(Vec::new());
        }
        groups.last_mut().unwrap().push(i + 1);
    }

    // Merge groups the data does not actually separate: an accidental
    // eigenvalue gap of the random element shows up as large off-block
    // entries between the two groups.
    let conj = h.conjugated(&u_sorted)?;
    let n_groups = groups.len();
    let mut merge_edges = Vec::new();
    for a in 0..n_groups {
        for b in a + 1..n_groups {
            if cross_block_max(&conj, &groups[a], &groups[b]) > MERGE_FACTOR * delta {
                merge_edges.push((a, b));
            }
        }
    }
    let merged: Vec<Vec<usize>> = if merge_edges.is_empty() {
        groups
    } else {
        let pattern = SparsityPattern::new(n_groups, merge_edges, [])?;
        connected_components(&pattern)
            .groups()
            .iter()
            .map(|component| {
                let mut members: Vec<usize> = component
                    .iter()
                    .flat_map(|&g| groups[g].iter().copied())
                    .collect();
                members.sort_unstable();
                members
            })
            .collect()
    };

    // Canonical order (size descending, then smallest member), then permute
    // columns so that the groups become contiguous index ranges.
    let mut ordered = merged;
    ordered.sort_by_key(|g| (std::cmp::Reverse(g.len()), g[0]));
    let mut u_final = DMatrix::zeros(d, d);
    let mut final_groups = Vec::with_capacity(ordered.len());
    let mut next = 0;
    for g in &ordered {
        let range: Vec<usize> = (next..next + g.len()).collect();
        for (&target, &source) in range.iter().zip(g) {
            u_final
                .column_mut(target)
                .copy_from(&u_sorted.column(source));
        }
        next += g.len();
        final_groups.push(range);
    }
    let structure = BlockStructure::new(d, final_groups)?;

    let conj_final = h.conjugated(&u_final)?;
    let mut off_block_residual = 0.0f64;
    let groups = structure.groups();
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            off_block_residual =
                off_block_residual.max(cross_block_max(&conj_final, &groups[a], &groups[b]));
        }
    }

    Ok(BlockDiagResult {
        u: OrthogonalTransform::new(u_final)?,
        structure,
        off_block_residual,
        eigen_gaps,
        kernel_dim,
    })
}

fn cross_block_max(conj: &SymmetricMatrixSet, a: &[usize], b: &[usize]) -> f64 {
    let mut worst = 0.0f64;
    for m in conj.mats() {
        for &i in a {
            for &j in b {
                worst = worst.max(m[(i, j)].abs());
            }
        }
    }
    worst
}

/// Fixed seed for the shared random coefficients of [`blocks_equivalent`],
/// so the check itself is deterministic.
const EQUIVALENCE_SEED: u64 = 0x0b10c5;

/// Decide whether two block diagonalizations of the same set are the same
/// up to block permutation and within-block orthogonal conjugation.
///
/// Both structures must have matching size profiles; blocks are then
/// matched greedily by the spectra of `sum_n c_n (U^T H_n U)` restricted to
/// each block, for one fixed random coefficient vector `c` (orthogonal
/// conjugation preserves these spectra). Sorted eigenvalue lists must agree
/// within `tol` entrywise.
pub fn blocks_equivalent(
    a: &BlockDiagResult,
    mats_a: &SymmetricMatrixSet,
    b: &BlockDiagResult,
    mats_b: &SymmetricMatrixSet,
    tol: f64,
) -> Result<bool> {
    if mats_a.dim() != mats_b.dim() {
        return Err(Error::DimensionMismatch {
            context: "block equivalence between sets".into(),
            expected: mats_a.dim(),
            got: mats_b.dim(),
        });
    }
    if mats_a.len() != mats_b.len() {
        return Err(Error::DimensionMismatch {
            context: "block equivalence needs equally sized sets".into(),
            expected: mats_a.len(),
            got: mats_b.len(),
        });
    }
    let mut profile_a = a.structure.profile();
    let mut profile_b = b.structure.profile();
    profile_a.sort_unstable();
    profile_b.sort_unstable();
    if profile_a != profile_b {
        return Ok(false);
    }

    let mut rng = rng_from_seed(EQUIVALENCE_SEED);
    let c: Vec<f64> = (0..mats_a.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();

    let spectra = |res: &BlockDiagResult, mats: &SymmetricMatrixSet| -> Result<Vec<Vec<f64>>> {
        let conj = mats.conjugated(res.u.matrix())?;
        let d = mats.dim();
        let mut w: DMatrix<f64> = DMatrix::zeros(d, d);
        for (cn, m) in c.iter().zip(conj.mats()) {
            w += *cn * m;
        }
        res.structure
            .groups()
            .iter()
            .map(|g| {
                let sub = w.select_rows(g.iter()).select_columns(g.iter());
                Ok(symmetric_eigen(&sub)?.eigenvalues)
            })
            .collect()
    };
    let spec_a = spectra(a, mats_a)?;
    let spec_b = spectra(b, mats_b)?;

    let distance = |x: &[f64], y: &[f64]| -> f64 {
        x.iter()
            .zip(y)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    };

    let mut used = vec![false; spec_b.len()];
    for sa in &spec_a {
        let mut best: Option<(usize, f64)> = None;
        for (j, sb) in spec_b.iter().enumerate() {
            if used[j] || sb.len() != sa.len() {
                continue;
            }
            let dist = distance(sa, sb);
            if best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((j, dist));
            }
        }
        match best {
            Some((j, dist)) if dist <= tol => used[j] = true,
            _ => return Ok(false),
        }
    }
    Ok(true)
}

/// Total squared commutator norm `sum_n ||A H_n - H_n A||_F^2`, the quantity
/// the near-kernel eigenvalues bound.
pub fn commutation_energy(a: &DMatrix<f64>, h: &SymmetricMatrixSet) -> f64 {
    h.mats()
        .iter()
        .map(|m| {
            let comm = a * m - m * a;
            comm.norm_squared()
        })
        .sum()
}
