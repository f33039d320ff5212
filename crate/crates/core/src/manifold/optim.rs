//! First-order minimizers on the rotation group.
//!
//! [`rgd_minimize`] performs Riemannian gradient descent: the Euclidean
//! gradient is projected to the tangent space, a step is taken, and the
//! iterate is pulled back to the manifold by a QR retraction. With Armijo
//! backtracking the loss is non-increasing by construction.
//!
//! [`landing_minimize`] never retracts: it follows the projected gradient
//! plus a penalty `lambda * (U U^T - I) U` that attracts iterates back to
//! the orthogonal manifold. It is cheaper per step (no QR) but only
//! converges from iterates with orthogonality defect below 1.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{matrix_rank, orthogonality_defect, span_dimension};
use crate::types::{rng_from_seed, SymmetricMatrixSet};

use super::loss::{euclidean_gradient, half_power_loss, sparsity_loss, LossConfig};
use super::rotations::{angles_to_rotation, sample_angles};

const ARMIJO_SLOPE: f64 = 1e-4;
const MIN_BACKTRACK_STEP: f64 = 1e-18;
const RANK_TOL_REL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerMethod {
    /// Retraction-based Riemannian gradient descent.
    Rgd,
    /// Landing flow with an orthogonality penalty.
    Landing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub method: OptimizerMethod,
    /// Base step size (`nu`).
    pub step_size: f64,
    /// Weight of the orthogonality penalty in the landing flow (`lambda`).
    pub landing_weight: f64,
    pub max_iters: usize,
    /// Terminate when the search-direction norm falls below this.
    pub grad_tol: f64,
    /// Additional orthogonality requirement for landing termination.
    pub defect_tol: f64,
    /// Armijo backtracking line search (gradient descent only; the landing
    /// flow always uses the fixed step size).
    pub backtracking: bool,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: OptimizerMethod::Rgd,
            step_size: 1e-2,
            landing_weight: 1.0,
            max_iters: 20_000,
            grad_tol: 1e-8,
            defect_tol: 1e-6,
            backtracking: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Search-direction norm fell below `grad_tol` (and, for landing, the
    /// defect below `defect_tol`).
    Converged,
    MaxIters,
    /// Backtracking could not find a decreasing step.
    Stalled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStat {
    pub iter: usize,
    pub loss: f64,
    /// Norm of the search direction (projected gradient, plus the penalty
    /// term for landing).
    pub grad_norm: f64,
    /// Frobenius norm of `U U^T - I`.
    pub defect: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub stats: Vec<IterationStat>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn final_stat(&self) -> &IterationStat {
        self.stats.last().expect("trajectory records every iteration")
    }

    /// Render as CSV with header `iter,loss,grad_norm,defect`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss,grad_norm,defect\n");
        for s in &self.stats {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e}\n",
                s.iter, s.loss, s.grad_norm, s.defect
            ));
        }
        out
    }
}

/// Project a Euclidean gradient `g` at `u` to the tangent space of the
/// orthogonal manifold: `X = (g - u g^T u) / 2`.
pub fn riemannian_gradient(u: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * g - 0.5 * u * g.transpose() * u
}

/// Pull `u - v` back to the orthogonal manifold via the thin QR
/// factorization with positive diagonal. `v = 0` returns `u` unchanged;
/// a rank-deficient `u - v` is an error.
pub fn qr_retraction(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if u.shape() != v.shape() {
        return Err(Error::DimensionMismatch {
            context: "retraction step".into(),
            expected: u.nrows(),
            got: v.nrows(),
        });
    }
    if v.iter().all(|&x| x == 0.0) {
        return Ok(u.clone());
    }
    let a = u - v;
    let scale = a.norm();
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..q.ncols() {
        let rjj = r[(j, j)];
        if rjj.abs() <= 1e-14 * scale {
            return Err(Error::OptimizationFailed(
                "retraction step produced a (numerically) rank-deficient matrix".into(),
            ));
        }
        if rjj < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

fn fix_determinant(u: &DMatrix<f64>) -> DMatrix<f64> {
    let mut u = u.clone();
    if u.determinant() < 0.0 {
        u.column_mut(0).neg_mut();
    }
    u
}

/// Riemannian gradient descent on the smoothed sparsity loss.
///
/// The starting point is reflected to determinant +1 if necessary. Returns
/// the final rotation and the per-iteration trajectory.
pub fn rgd_minimize(
    mats: &SymmetricMatrixSet,
    u0: &DMatrix<f64>,
    cfg: &OptimizerConfig,
    loss_cfg: &LossConfig,
) -> Result<(DMatrix<f64>, Trajectory)> {
    check_start(mats, u0)?;
    if orthogonality_defect(u0) > 1e-6 {
        return Err(Error::InvalidArgument(
            "gradient descent requires an orthogonal starting point".into(),
        ));
    }
    let mut u = fix_determinant(u0);
    let mut loss = sparsity_loss(mats, &u, loss_cfg);
    let mut step = cfg.step_size;
    let mut stats = Vec::new();

    for iter in 0..cfg.max_iters {
        let g = euclidean_gradient(mats, &u, loss_cfg);
        let x = riemannian_gradient(&u, &g);
        let gn = x.norm();
        stats.push(IterationStat {
            iter,
            loss,
            grad_norm: gn,
            defect: orthogonality_defect(&u),
        });
        if !loss.is_finite() || !gn.is_finite() {
            return Err(Error::NonFinite("gradient descent iterate".into()));
        }
        if gn <= cfg.grad_tol {
            return Ok((
                u,
                Trajectory {
                    stats,
                    termination: Termination::Converged,
                },
            ));
        }
        if cfg.backtracking {
            let mut t = step;
            loop {
                let cand = qr_retraction(&u, &(t * &x))?;
                let cand_loss = sparsity_loss(mats, &cand, loss_cfg);
                if cand_loss <= loss - ARMIJO_SLOPE * t * gn * gn {
                    u = cand;
                    loss = cand_loss;
                    // Re-expand so a single hard step does not pin the
                    // search to tiny steps forever.
                    step = (2.0 * t).min(cfg.step_size * 64.0);
                    break;
                }
                t *= 0.5;
                if t < MIN_BACKTRACK_STEP {
                    return Ok((
                        u,
                        Trajectory {
                            stats,
                            termination: Termination::Stalled,
                        },
                    ));
                }
            }
        } else {
            u = qr_retraction(&u, &(cfg.step_size * &x))?;
            loss = sparsity_loss(mats, &u, loss_cfg);
        }
    }
    let g = euclidean_gradient(mats, &u, loss_cfg);
    let gn = riemannian_gradient(&u, &g).norm();
    stats.push(IterationStat {
        iter: cfg.max_iters,
        loss,
        grad_norm: gn,
        defect: orthogonality_defect(&u),
    });
    Ok((
        u,
        Trajectory {
            stats,
            termination: Termination::MaxIters,
        },
    ))
}

/// Landing flow: fixed-step descent along `X + lambda (U U^T - I) U` without
/// retraction. Errors out if the orthogonality defect exceeds 1, the
/// boundary of the attraction region.
pub fn landing_minimize(
    mats: &SymmetricMatrixSet,
    u0: &DMatrix<f64>,
    cfg: &OptimizerConfig,
    loss_cfg: &LossConfig,
) -> Result<(DMatrix<f64>, Trajectory)> {
    check_start(mats, u0)?;
    let d = u0.nrows();
    let mut u = fix_determinant(u0);
    let mut stats = Vec::new();

    for iter in 0..=cfg.max_iters {
        let loss = sparsity_loss(mats, &u, loss_cfg);
        let g = euclidean_gradient(mats, &u, loss_cfg);
        let x = riemannian_gradient(&u, &g);
        let defect_mat = &u * u.transpose() - DMatrix::identity(d, d);
        let defect = defect_mat.norm();
        let dir = &x + cfg.landing_weight * defect_mat * &u;
        let dn = dir.norm();
        stats.push(IterationStat {
            iter,
            loss,
            grad_norm: dn,
            defect,
        });
        if !loss.is_finite() || !dn.is_finite() {
            return Err(Error::NonFinite("landing iterate".into()));
        }
        if defect > 1.0 {
            return Err(Error::OptimizationFailed(format!(
                "landing iterate left the attraction region (defect {defect:.3} > 1); \
                 reduce the step size"
            )));
        }
        if dn <= cfg.grad_tol && defect <= cfg.defect_tol {
            return Ok((
                u,
                Trajectory {
                    stats,
                    termination: Termination::Converged,
                },
            ));
        }
        if iter < cfg.max_iters {
            u -= cfg.step_size * &dir;
        }
    }
    Ok((
        u,
        Trajectory {
            stats,
            termination: Termination::MaxIters,
        },
    ))
}

fn check_start(mats: &SymmetricMatrixSet, u0: &DMatrix<f64>) -> Result<()> {
    if u0.nrows() != mats.dim() || u0.ncols() != mats.dim() {
        return Err(Error::DimensionMismatch {
            context: "optimizer starting point".into(),
            expected: mats.dim(),
            got: u0.nrows(),
        });
    }
    Ok(())
}

/// Outcome of the multi-start initialization protocol.
#[derive(Debug, Clone)]
pub struct RandomInitOutcome {
    /// The candidate with the smallest [`half_power_loss`] after its short
    /// optimization run.
    pub u: DMatrix<f64>,
    /// Ranking score of every candidate, in draw order.
    pub candidate_scores: Vec<f64>,
}

/// Number of iterations each restart candidate is optimized for.
pub const INIT_CANDIDATE_ITERS: usize = 5_000;

/// Multi-start initialization: draw `n_candidates` rotations uniformly in the
/// angle parametrization, optimize each for [`INIT_CANDIDATE_ITERS`]
/// iterations, and keep the one with the smallest [`half_power_loss`]
/// (ties favor the earliest draw). Deterministic in `cfg.seed`.
pub fn random_init(
    mats: &SymmetricMatrixSet,
    cfg: &OptimizerConfig,
    loss_cfg: &LossConfig,
    n_candidates: usize,
) -> Result<RandomInitOutcome> {
    if n_candidates == 0 {
        return Err(Error::EmptyInput("zero initialization candidates".into()));
    }
    let d = mats.dim();
    let mut rng = rng_from_seed(cfg.seed);
    let cand_cfg = OptimizerConfig {
        max_iters: INIT_CANDIDATE_ITERS,
        ..*cfg
    };
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    let mut scores = Vec::with_capacity(n_candidates);
    let mut last_err = None;
    for _ in 0..n_candidates {
        let angles = sample_angles(d, &mut rng);
        let u0 = angles_to_rotation(d, &angles)?;
        let run = match cand_cfg.method {
            OptimizerMethod::Rgd => rgd_minimize(mats, &u0, &cand_cfg, loss_cfg),
            OptimizerMethod::Landing => landing_minimize(mats, &u0, &cand_cfg, loss_cfg),
        };
        match run {
            Ok((u, _)) => {
                let score = half_power_loss(mats, &u);
                scores.push(score);
                if best.as_ref().is_none_or(|(b, _)| score < *b) {
                    best = Some((score, u));
                }
            }
            Err(e) => {
                scores.push(f64::INFINITY);
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((_, u)) => Ok(RandomInitOutcome {
            u,
            candidate_scores: scores,
        }),
        None => Err(last_err.expect("no candidates implies an error was seen")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertificateVerdict {
    /// The achieved nonzero count matches a provable lower bound, so `u`
    /// is a global minimizer of the count objective.
    CertifiedMinimum,
    Inconclusive,
}

/// Result of [`sufficient_optimality_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OptimalityCertificate {
    pub verdict: CertificateVerdict,
    /// Ordered nonzero entries of the conjugated set (root-mean-square above
    /// the threshold).
    pub nonzero_ordered: usize,
    /// Dimension of the linear span of the set.
    pub span_dimension: usize,
    /// Largest rank among the matrices.
    pub max_rank: usize,
    /// `max(span_dimension, max_rank)`: no rotation can do better when the
    /// diagonals vanish.
    pub lower_bound: usize,
    /// Whether the original set has (numerically) zero diagonals, the
    /// hypothesis under which the bound is valid.
    pub diagonals_vanish: bool,
}

/// Compare the nonzero count achieved by `u` against the dimension/rank
/// lower bound. Entries count as nonzero when their root-mean-square over
/// the set exceeds `count_tol`.
pub fn sufficient_optimality_check(
    mats: &SymmetricMatrixSet,
    u: &DMatrix<f64>,
    count_tol: f64,
) -> Result<OptimalityCertificate> {
    if u.nrows() != mats.dim() {
        return Err(Error::DimensionMismatch {
            context: "certificate rotation".into(),
            expected: mats.dim(),
            got: u.nrows(),
        });
    }
    let d = mats.dim();
    let n = mats.len() as f64;

    let diagonals_vanish = (0..d).all(|i| {
        let ms: f64 = mats.mats().iter().map(|h| h[(i, i)].powi(2)).sum::<f64>() / n;
        ms.sqrt() <= count_tol
    });

    let conj = mats.conjugated(u)?;
    let q = super::loss::entrywise_square_sum(&conj);
    let nonzero_ordered = q.iter().filter(|&&v| (v / n).sqrt() > count_tol).count();

    let span_dim = span_dimension(mats, RANK_TOL_REL);
    let max_rank = mats
        .mats()
        .iter()
        .map(|h| matrix_rank(h, RANK_TOL_REL))
        .max()
        .unwrap_or(0);
    let lower_bound = span_dim.max(max_rank);

    let verdict = if diagonals_vanish && nonzero_ordered == lower_bound {
        CertificateVerdict::CertifiedMinimum
    } else {
        CertificateVerdict::Inconclusive
    };
    Ok(OptimalityCertificate {
        verdict,
        nonzero_ordered,
        span_dimension: span_dim,
        max_rank,
        lower_bound,
        diagonals_vanish,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::haar_rotation;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, DMatrix, DVector};
    use rand::Rng;

    fn random_symmetric(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        (&a + a.transpose()) / 2.0
    }

    /// Commuting set: simultaneously diagonalizable by a known rotation.
    fn rotated_diagonal_set(d: usize, n: usize, seed: u64) -> (SymmetricMatrixSet, DMatrix<f64>) {
        let mut rng = rng_from_seed(seed);
        let r = haar_rotation(d, &mut rng);
        let mats = (0..n)
            .map(|_| {
                let diag =
                    DVector::from_fn(d, |i, _| (i + 1) as f64 + rng.gen_range(-0.3..0.3_f64));
                &r * DMatrix::from_diagonal(&diag) * r.transpose()
            })
            .collect();
        (SymmetricMatrixSet::new(mats).unwrap(), r)
    }

    #[test]
    fn riemannian_gradient_is_tangent() {
        let mut rng = rng_from_seed(5);
        let u = haar_rotation(4, &mut rng);
        let g = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let x = riemannian_gradient(&u, &g);
        let skew = u.tr_mul(&x);
        assert_relative_eq!(skew.clone(), -skew.transpose(), epsilon = 1e-12);
    }

    #[test]
    fn retraction_with_zero_step_is_exact_identity() {
        let mut rng = rng_from_seed(6);
        let u = haar_rotation(3, &mut rng);
        let q = qr_retraction(&u, &DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(q, u);
    }

    #[test]
    fn retraction_returns_orthogonal_matrices() {
        let mut rng = rng_from_seed(7);
        for _ in 0..10 {
            let u = haar_rotation(5, &mut rng);
            let v = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-0.2..0.2));
            let q = qr_retraction(&u, &v).unwrap();
            assert!(orthogonality_defect(&q) < 1e-13);
        }
    }

    #[test]
    fn retraction_agrees_with_the_step_to_first_order() {
        let mut rng = rng_from_seed(8);
        let u = haar_rotation(4, &mut rng);
        let g = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let x = riemannian_gradient(&u, &g);
        let residual = |t: f64| {
            let q = qr_retraction(&u, &(t * &x)).unwrap();
            (&q - (&u - t * &x)).norm()
        };
        let r2 = residual(1e-2);
        let r3 = residual(1e-3);
        let slope = (r2 / r3).log10();
        assert!(slope >= 1.9, "residual decays with slope {slope}, want ~2");
    }

    #[test]
    fn plane_retraction_step_rotates_by_the_step_angle() {
        let u = DMatrix::<f64>::identity(2, 2);
        let t = 1e-2;
        let v = dmatrix![0.0, 1.0; -1.0, 0.0] * t;
        let q = qr_retraction(&u, &v).unwrap();
        let angle = q[(1, 0)].atan2(q[(0, 0)]);
        assert_relative_eq!(angle, t, max_relative = 1e-3);
    }

    #[test]
    fn rgd_stops_immediately_near_a_critical_point() {
        let (mats, r) = rotated_diagonal_set(3, 2, 10);
        let cfg = OptimizerConfig {
            grad_tol: 1e-6,
            ..OptimizerConfig::default()
        };
        let (_, traj) = rgd_minimize(&mats, &r, &cfg, &LossConfig::default()).unwrap();
        assert_eq!(traj.termination, Termination::Converged);
        assert!(traj.stats.len() <= 5, "took {} iterations", traj.stats.len());
    }

    #[test]
    fn rgd_diagonalizes_a_single_two_by_two_matrix() {
        let mut rng = rng_from_seed(11);
        let r = haar_rotation(2, &mut rng);
        let h = &r * DMatrix::from_diagonal(&nalgebra::dvector![3.0, 1.0]) * r.transpose();
        let mats = SymmetricMatrixSet::new(vec![h]).unwrap();
        let u0 = super::super::rotations::angles_to_rotation(2, &[0.3]).unwrap();
        let cfg = OptimizerConfig {
            grad_tol: 1e-10,
            ..OptimizerConfig::default()
        };
        let (u, _) = rgd_minimize(&mats, &u0, &cfg, &LossConfig::default()).unwrap();
        let m = mats.conjugated(&u).unwrap();
        let off = m.mats()[0][(0, 1)];
        assert!(off * off <= 1e-8, "off-diagonal {off} too large");
    }

    #[test]
    fn backtracking_makes_the_loss_non_increasing() {
        let mut rng = rng_from_seed(12);
        let mats = SymmetricMatrixSet::new(
            (0..3).map(|_| random_symmetric(4, &mut rng)).collect(),
        )
        .unwrap();
        let u0 = haar_rotation(4, &mut rng);
        let cfg = OptimizerConfig {
            max_iters: 300,
            grad_tol: 0.0,
            ..OptimizerConfig::default()
        };
        let (_, traj) = rgd_minimize(&mats, &u0, &cfg, &LossConfig::default()).unwrap();
        for w in traj.stats.windows(2) {
            assert!(
                w[1].loss <= w[0].loss + 1e-12,
                "loss increased: {} -> {}",
                w[0].loss,
                w[1].loss
            );
        }
    }

    #[test]
    fn rgd_rejects_non_orthogonal_start() {
        let (mats, _) = rotated_diagonal_set(3, 2, 13);
        let u0 = DMatrix::from_element(3, 3, 0.5);
        assert!(
            rgd_minimize(&mats, &u0, &OptimizerConfig::default(), &LossConfig::default())
                .is_err()
        );
    }

    #[test]
    fn rgd_flips_reflections_to_rotations() {
        let (mats, _) = rotated_diagonal_set(3, 2, 14);
        let mut u0 = DMatrix::<f64>::identity(3, 3);
        u0[(0, 0)] = -1.0;
        let cfg = OptimizerConfig {
            max_iters: 5,
            ..OptimizerConfig::default()
        };
        let (u, _) = rgd_minimize(&mats, &u0, &cfg, &LossConfig::default()).unwrap();
        assert!(u.determinant() > 0.0);
    }

    #[test]
    fn landing_keeps_iterates_near_the_manifold() {
        // Non-commuting random instance: the loss part of the flow keeps
        // moving, but the penalty holds the defect far below the tolerance.
        let mut rng = rng_from_seed(15);
        let mats = SymmetricMatrixSet::new(
            (0..3).map(|_| random_symmetric(3, &mut rng)).collect(),
        )
        .unwrap();
        let u0 = haar_rotation(3, &mut rng);
        let cfg = OptimizerConfig {
            method: OptimizerMethod::Landing,
            step_size: 1e-2,
            landing_weight: 1.0,
            max_iters: 2_000,
            grad_tol: 0.0,
            ..OptimizerConfig::default()
        };
        let (_, traj) = landing_minimize(&mats, &u0, &cfg, &LossConfig::default()).unwrap();
        assert_eq!(traj.termination, Termination::MaxIters);
        let final_defect = traj.final_stat().defect;
        assert!(final_defect < 1e-3, "defect {final_defect}");
    }

    #[test]
    fn landing_is_stationary_at_critical_points() {
        let (mats, r) = rotated_diagonal_set(3, 3, 20);
        let cfg = OptimizerConfig {
            method: OptimizerMethod::Landing,
            grad_tol: 1e-8,
            ..OptimizerConfig::default()
        };
        let (u, traj) = landing_minimize(&mats, &r, &cfg, &LossConfig::default()).unwrap();
        assert_eq!(traj.termination, Termination::Converged);
        assert!(traj.stats.len() <= 5);
        assert!((&u - &r).norm() < 1e-6);
    }

    #[test]
    fn penalty_flow_contracts_the_defect_monotonically() {
        // Zero matrices: the Euclidean gradient vanishes identically with
        // epsilon > 0 only on the diagonal slots... use the off-diagonal
        // loss so the flow is the pure orthogonality penalty.
        let mats =
            SymmetricMatrixSet::new(vec![DMatrix::zeros(3, 3), DMatrix::zeros(3, 3)]).unwrap();
        let mut rng = rng_from_seed(21);
        let u0 = 1.15 * haar_rotation(3, &mut rng);
        let initial_defect = (&u0 * u0.transpose() - DMatrix::identity(3, 3)).norm();
        assert!(initial_defect < 1.0);
        let cfg = OptimizerConfig {
            method: OptimizerMethod::Landing,
            step_size: 1e-2,
            landing_weight: 5.0,
            max_iters: 20_000,
            grad_tol: 1e-10,
            defect_tol: 1e-8,
            ..OptimizerConfig::default()
        };
        let (_, traj) = landing_minimize(&mats, &u0, &cfg, &LossConfig::default()).unwrap();
        for w in traj.stats.windows(2) {
            assert!(w[1].defect <= w[0].defect + 1e-12);
        }
        assert_eq!(traj.termination, Termination::Converged);
        assert!(traj.final_stat().defect < 1e-8);
    }

    #[test]
    fn landing_rejects_starts_outside_the_attraction_region() {
        let (mats, r) = rotated_diagonal_set(3, 2, 16);
        let u0 = 3.0 * &r; // defect >> 1
        let cfg = OptimizerConfig {
            method: OptimizerMethod::Landing,
            ..OptimizerConfig::default()
        };
        assert!(landing_minimize(&mats, &u0, &cfg, &LossConfig::default()).is_err());
    }

    #[test]
    fn random_init_is_deterministic_and_special_orthogonal() {
        let (mats, _) = rotated_diagonal_set(3, 2, 17);
        let cfg = OptimizerConfig {
            max_iters: 200,
            seed: 99,
            ..OptimizerConfig::default()
        };
        let a = random_init(&mats, &cfg, &LossConfig::default(), 3).unwrap();
        let b = random_init(&mats, &cfg, &LossConfig::default(), 3).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.candidate_scores, b.candidate_scores);
        assert_eq!(a.candidate_scores.len(), 3);
        assert!(a.u.determinant() > 0.0);
        assert!(orthogonality_defect(&a.u) < 1e-12);
    }

    #[test]
    fn certificate_confirms_an_exchange_matrix() {
        let mats = SymmetricMatrixSet::new(vec![dmatrix![0.0, 1.0; 1.0, 0.0]]).unwrap();
        let cert =
            sufficient_optimality_check(&mats, &DMatrix::identity(2, 2), 1e-8).unwrap();
        assert_eq!(cert.verdict, CertificateVerdict::CertifiedMinimum);
        assert_eq!(cert.nonzero_ordered, 2);
        assert_eq!(cert.span_dimension, 1);
        assert_eq!(cert.max_rank, 2);
        assert_eq!(cert.lower_bound, 2);
        assert!(cert.diagonals_vanish);
    }

    #[test]
    fn certificate_is_inconclusive_on_dense_sets() {
        let mut rng = rng_from_seed(18);
        let mats = SymmetricMatrixSet::new(
            (0..2).map(|_| random_symmetric(4, &mut rng)).collect(),
        )
        .unwrap();
        let cert =
            sufficient_optimality_check(&mats, &DMatrix::identity(4, 4), 1e-8).unwrap();
        assert_eq!(cert.verdict, CertificateVerdict::Inconclusive);
        assert!(!cert.diagonals_vanish);
    }

    #[test]
    fn trajectory_csv_has_header_and_rows() {
        let (mats, r) = rotated_diagonal_set(3, 2, 19);
        let cfg = OptimizerConfig {
            max_iters: 10,
            grad_tol: 1e-6,
            ..OptimizerConfig::default()
        };
        let (_, traj) = rgd_minimize(&mats, &r, &cfg, &LossConfig::default()).unwrap();
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("iter,loss,grad_norm,defect"));
        assert_eq!(csv.lines().count(), traj.stats.len() + 1);
    }
}
