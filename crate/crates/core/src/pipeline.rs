//! End-to-end orchestration: vertex minimization → joint block
//! diagonalization → per-block sparsity minimization, plus the evaluation
//! metrics (sparsity gap χ and failure ratio).
//!
//! The composed transform is U_total = U_V · [(U_bd · blockdiag(U_k)) ⊕ I]:
//! per-block minimizers embed block-diagonally into the active subspace,
//! which then pads with the identity on the inactive coordinates.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::block_diag::error_controlled_blockdiag;
use crate::decomposition::SampledFunction;
use crate::error::{Error, Result};
use crate::graphs::{pattern_from_matrix_set, BlockStructure, SparsityPattern};
use crate::linalg::span_orthonormal_basis;
use crate::manifold::{
    grid_cardinality, grid_search, landing_minimize, qr_retraction, random_init, rgd_minimize,
    riemannian_gradient, sparsity_loss, GridConfig, LossConfig, OptimizerConfig, OptimizerMethod,
    Trajectory,
};
use crate::types::{derive_seed, OrthogonalTransform, SymmetricMatrixSet};
use crate::vertex_min::{
    reduce_hessians, vertex_minimize, GradientSample, DEFAULT_TAU_CLEAN,
};

/// Default thresholds at which recovered patterns are reported.
pub const DEFAULT_ETAS: [f64; 4] = [1e-9, 1e-6, 1e-4, 1e-2];

/// Tuning knobs of the full pipeline. All tolerances are relative where
/// noted; the master seed feeds every stage through derived streams.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Vertex-stage singular-value threshold, relative to σ_max.
    pub tau_rel: f64,
    /// Block-diagonalization tolerance, relative to the reduced set's
    /// Frobenius scale.
    pub delta_rel: f64,
    /// Threshold (relative to σ_max) for the orthonormal span basis that
    /// replaces each matrix set before optimization. This caps the
    /// per-evaluation cost at the span dimension and, on noisy data,
    /// discards the noise bulk outside the signal span.
    pub span_tau_rel: f64,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    /// Lattice for per-block global initialization; `None` (or an
    /// infeasible lattice) falls back to random restarts.
    pub grid: Option<GridConfig>,
    /// Restart count for the random-initialization fallback.
    pub random_candidates: usize,
    /// Thresholds at which patterns are reported.
    pub etas: Vec<f64>,
    /// Drive detected off-support entries to machine zero after the
    /// smoothed optimization (the smoothed minimizer leaves them at
    /// roughly √ε, visible at tight thresholds).
    pub polish: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_rel: DEFAULT_TAU_CLEAN,
            delta_rel: 1e-6,
            span_tau_rel: 1e-8,
            loss: LossConfig::diagonal_inclusive(),
            optimizer: OptimizerConfig::default(),
            grid: Some(GridConfig::new(0.25)),
            random_candidates: 5,
            etas: DEFAULT_ETAS.to_vec(),
            polish: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Preset for noisy observations: looser rank threshold (1e−3·√d), a
    /// block tolerance above the noise floor, a span threshold that drops
    /// the noise bulk (noise directions carry ≈σ·√N energy versus the
    /// signal's ≈√N), and no machine-precision polish (noise keeps
    /// entries finite anyway).
    pub fn noisy(d: usize) -> Self {
        Self {
            tau_rel: crate::vertex_min::noisy_tau(d),
            delta_rel: 1e-2,
            span_tau_rel: 1e-2,
            polish: false,
            ..Self::default()
        }
    }
}

/// Gradient and Hessian observations of one function at shared sample
/// points.
#[derive(Debug, Clone)]
pub struct FunctionSamples {
    pub gradients: GradientSample,
    pub hessians: SymmetricMatrixSet,
}

impl FunctionSamples {
    pub fn new(gradients: GradientSample, hessians: SymmetricMatrixSet) -> Result<Self> {
        if hessians.len() != gradients.n() {
            return Err(Error::DimensionMismatch {
                context: "hessian count vs gradient count".into(),
                expected: gradients.n(),
                got: hessians.len(),
            });
        }
        if hessians.dim() != gradients.d() {
            return Err(Error::DimensionMismatch {
                context: "hessian dimension vs gradient dimension".into(),
                expected: gradients.d(),
                got: hessians.dim(),
            });
        }
        Ok(Self { gradients, hessians })
    }

    /// Evaluate analytic gradients and Hessians at `n` uniform domain
    /// points (the same points for both).
    pub fn from_function(f: &SampledFunction, n: usize, seed: u64) -> Result<Self> {
        let gradients = GradientSample::from_function(f, n, seed)?;
        let mats = gradients
            .points()
            .iter()
            .map(|x| f.hess(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gradients,
            hessians: SymmetricMatrixSet::new(mats)?,
        })
    }
}

/// How one block's optimizer was initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InitKind {
    /// Size-1 blocks need no optimization.
    Identity,
    Grid,
    Random,
}

/// Optimization record for one block.
#[derive(Debug, Clone)]
pub struct BlockRun {
    /// Coordinates of the block in the block-diagonalized basis
    /// (a contiguous range).
    pub indices: Vec<usize>,
    pub init: InitKind,
    pub final_loss: f64,
    pub iters: usize,
    /// Per-iteration record (None for size-1 blocks, which skip
    /// optimization).
    pub trajectory: Option<Trajectory>,
}

/// Output of the full pipeline.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub u_total: OrthogonalTransform,
    /// Active dimension found by the vertex stage.
    pub d1: usize,
    pub singular_values: Vec<f64>,
    /// Largest Hessian entry discarded by the vertex reduction.
    pub border_residual: f64,
    /// Block structure of the reduced set (sizes sum to d1).
    pub structure: BlockStructure,
    pub off_block_residual: f64,
    pub block_runs: Vec<BlockRun>,
    /// Whether the machine-precision polish ran and met its target.
    pub polished: bool,
    /// Largest off-support mean-|entry| after the final stage.
    pub polish_residual: f64,
    /// Recovered support of U_totalᵀ H_n U_total at each requested η.
    pub patterns_by_eta: Vec<(f64, SparsityPattern)>,
}

/// Output of sparsifying a bare matrix set (no gradients, no reduction).
#[derive(Debug, Clone)]
pub struct SparsifyResult {
    pub u: OrthogonalTransform,
    pub init: InitKind,
    pub trajectory: Trajectory,
    pub final_loss: f64,
    pub polished: bool,
    pub polish_residual: f64,
    pub patterns_by_eta: Vec<(f64, SparsityPattern)>,
}

fn validate_config(cfg: &PipelineConfig) -> Result<()> {
    if !(cfg.tau_rel >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "vertex threshold must be nonnegative, got {}",
            cfg.tau_rel
        )));
    }
    if !(cfg.delta_rel > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "block tolerance must be positive, got {}",
            cfg.delta_rel
        )));
    }
    for &eta in &cfg.etas {
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "pattern threshold must be finite and nonnegative, got {eta}"
            )));
        }
    }
    Ok(())
}

/// Minimizer of one matrix set with its provenance.
struct OptimizeOutcome {
    u: DMatrix<f64>,
    init: InitKind,
    final_loss: f64,
    iters: usize,
    trajectory: Option<Trajectory>,
}

/// Initialize and optimize over SO(dim) for one matrix set (a block or the
/// whole set).
fn optimize_set(sub: &SymmetricMatrixSet, cfg: &PipelineConfig, seed: u64) -> Result<OptimizeOutcome> {
    let s = sub.dim();
    if s == 1 {
        let u = DMatrix::identity(1, 1);
        let final_loss = sparsity_loss(sub, &u, &cfg.loss);
        return Ok(OptimizeOutcome {
            u,
            init: InitKind::Identity,
            final_loss,
            iters: 0,
            trajectory: None,
        });
    }
    let mut opt_cfg = cfg.optimizer;
    opt_cfg.seed = seed;
    let (u0, init) = match &cfg.grid {
        Some(grid) if grid_cardinality(s, grid.h)? <= grid.max_points => {
            let res = grid_search(sub, grid, &cfg.loss)?;
            (res.u, InitKind::Grid)
        }
        _ => {
            let res = random_init(sub, &opt_cfg, &cfg.loss, cfg.random_candidates)?;
            (res.u, InitKind::Random)
        }
    };
    let (u, traj) = match opt_cfg.method {
        OptimizerMethod::Rgd => rgd_minimize(sub, &u0, &opt_cfg, &cfg.loss)?,
        OptimizerMethod::Landing => landing_minimize(sub, &u0, &opt_cfg, &cfg.loss)?,
    };
    let stat = traj.final_stat();
    Ok(OptimizeOutcome {
        u,
        init,
        final_loss: stat.loss,
        iters: stat.iter,
        trajectory: Some(traj),
    })
}

/// Largest mean-|entry| over the masked slots of the conjugated set.
fn masked_mean_abs_max(mats: &SymmetricMatrixSet, v: &DMatrix<f64>, mask: &[(usize, usize)]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    let mean = mats
        .conjugated(v)
        .expect("dimensions checked by caller")
        .mean_abs();
    mask.iter()
        .map(|&(i, j)| mean[(i, j)])
        .fold(0.0f64, f64::max)
}

/// Outcome of the machine-precision support polish.
struct PolishOutcome {
    v: DMatrix<f64>,
    accepted: bool,
    residual: f64,
}

/// Refine `v0` so that off-support entries of the conjugated set vanish to
/// machine precision: detect the support Ĵ of the mean-|entry| matrix at
/// `DETECT_REL` times its maximum, then minimize F(V) = Σ_n Σ_{(i,j)∉Ĵ}
/// (VᵀH_nV)²_{ij} by Riemannian descent with an adaptive step. Diagonal
/// slots below the detection threshold participate too (a coordinate a
/// function depends on only linearly has an exactly vanishing diagonal).
///
/// The polish is fail-safe: it refuses to run when the entries outside the
/// detected support are not already clearly separated (a true coupling may
/// have been misclassified), and its result is only adopted when the
/// remaining off-support residual meets `ACCEPT_REL` relative to the
/// largest entry.
fn polish_support(mats: &SymmetricMatrixSet, v0: &DMatrix<f64>) -> Result<PolishOutcome> {
    const DETECT_REL: f64 = 1e-2;
    const SEPARATION_REL: f64 = 1e-3;
    const ACCEPT_REL: f64 = 1e-11;
    const MAX_ITERS: usize = 4000;

    let d = mats.dim();
    let mean = mats.conjugated(v0)?.mean_abs();
    let max_entry = mean.amax();
    let mut mask = Vec::new(); // slots outside the detected support
    for i in 0..d {
        for j in 0..d {
            if mean[(i, j)] <= DETECT_REL * max_entry {
                mask.push((i, j));
            }
        }
    }
    let start_resid = mask
        .iter()
        .map(|&(i, j)| mean[(i, j)])
        .fold(0.0f64, f64::max);
    if mask.is_empty() || max_entry == 0.0 {
        return Ok(PolishOutcome {
            v: v0.clone(),
            accepted: true,
            residual: start_resid,
        });
    }
    if start_resid > SEPARATION_REL * max_entry {
        // No clear gap between support and complement; polishing could
        // erase a genuine coupling. Keep the unpolished transform.
        return Ok(PolishOutcome {
            v: v0.clone(),
            accepted: false,
            residual: start_resid,
        });
    }

    let objective = |v: &DMatrix<f64>| -> f64 {
        let mut total = 0.0;
        for h in mats.iter() {
            let m = v.transpose() * h * v;
            for &(i, j) in &mask {
                total += m[(i, j)] * m[(i, j)];
            }
        }
        total
    };
    let target = ACCEPT_REL * max_entry;

    let mut v = v0.clone();
    let mut fv = objective(&v);
    let mut step = 1e-2;
    for _ in 0..MAX_ITERS {
        if masked_mean_abs_max(mats, &v, &mask) <= target {
            break;
        }
        // Euclidean gradient of F: Σ_n 4 H_n V (S ∘ M_n) for symmetric
        // H_n and mask.
        let mut eg: DMatrix<f64> = DMatrix::zeros(d, d);
        for h in mats.iter() {
            let m = v.transpose() * h * &v;
            let mut masked: DMatrix<f64> = DMatrix::zeros(d, d);
            for &(i, j) in &mask {
                masked[(i, j)] = m[(i, j)];
            }
            let masked = (&masked + masked.transpose()) * 0.5;
            eg += 4.0 * h * &v * masked;
        }
        let rg = riemannian_gradient(&v, &eg);
        let gn2 = rg.norm_squared();
        if gn2 == 0.0 {
            break;
        }
        // Backtracking with growth on success.
        let mut accepted = false;
        for _ in 0..60 {
            let cand = qr_retraction(&v, &(step * &rg))?;
            let fc = objective(&cand);
            if fc <= fv - 1e-4 * step * gn2 {
                v = cand;
                fv = fc;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let residual = masked_mean_abs_max(mats, &v, &mask);
    if residual <= target {
        Ok(PolishOutcome {
            v,
            accepted: true,
            residual,
        })
    } else {
        Ok(PolishOutcome {
            v: v0.clone(),
            accepted: false,
            residual: start_resid,
        })
    }
}

fn patterns_at_etas(
    mats: &SymmetricMatrixSet,
    u: &DMatrix<f64>,
    etas: &[f64],
) -> Result<Vec<(f64, SparsityPattern)>> {
    let conj = mats.conjugated(u)?;
    etas.iter()
        .map(|&eta| Ok((eta, pattern_from_matrix_set(&conj, eta)?)))
        .collect()
}

/// Run the full three-stage recovery on function samples.
pub fn run_pipeline(samples: &FunctionSamples, cfg: &PipelineConfig) -> Result<PipelineResult> {
    validate_config(cfg)?;
    let d = samples.gradients.d();

    // Stage 1: active-subspace reduction.
    let red = vertex_minimize(&samples.gradients, cfg.tau_rel)
        .map_err(Error::stage("vertex minimization"))?;
    let reduced =
        reduce_hessians(&samples.hessians, &red).map_err(Error::stage("vertex minimization"))?;
    let d1 = red.d1;

    // Stage 2: error-controlled joint block diagonalization.
    let (bd_u, structure, off_block_residual) = if d1 == 1 {
        (
            DMatrix::identity(1, 1),
            BlockStructure::new(1, vec![vec![0]]).expect("static structure"),
            0.0,
        )
    } else {
        let delta = cfg.delta_rel * reduced.set.frobenius_scale();
        let bd = error_controlled_blockdiag(&reduced.set, delta, derive_seed(cfg.seed, 0xb10c))
            .map_err(Error::stage("block diagonalization"))?;
        (
            bd.u.matrix().clone(),
            bd.structure,
            bd.off_block_residual,
        )
    };

    // Stage 3: per-block sparsity minimization (blocks are contiguous
    // ranges in the block-diagonalized basis). Each block's matrices are
    // replaced by an orthonormal basis of their span, capping the loss
    // cost at the span dimension instead of the sample count.
    let bd_set = reduced.set.conjugated(&bd_u)?;
    let runs: Vec<(Vec<usize>, OptimizeOutcome)> = structure
        .groups()
        .par_iter()
        .enumerate()
        .map(|(k, group)| {
            let sub = bd_set.principal_block(group)?;
            let sub = if sub.dim() > 1 {
                span_orthonormal_basis(&sub, cfg.span_tau_rel)
                    .map_err(Error::stage("span reduction"))?
                    .basis
            } else {
                sub
            };
            let out = optimize_set(&sub, cfg, derive_seed(cfg.seed, k as u64))
                .map_err(Error::stage("block optimization"))?;
            Ok((group.clone(), out))
        })
        .collect::<Result<_>>()?;

    let mut u_blocks = DMatrix::<f64>::identity(d1, d1);
    let mut block_runs = Vec::with_capacity(runs.len());
    for (group, out) in runs {
        let start = group[0];
        u_blocks
            .view_mut((start, start), (group.len(), group.len()))
            .copy_from(&out.u);
        block_runs.push(BlockRun {
            indices: group,
            init: out.init,
            final_loss: out.final_loss,
            iters: out.iters,
            trajectory: out.trajectory,
        });
    }

    let mut v_reduced = &bd_u * u_blocks;
    let (polished, polish_residual) = if cfg.polish {
        // Polishing on the span basis is equivalent (zero entries across a
        // basis are zero across the span) and much cheaper than the raw set.
        let basis = span_orthonormal_basis(&reduced.set, cfg.span_tau_rel)
            .map_err(Error::stage("span reduction"))?
            .basis;
        let out = polish_support(&basis, &v_reduced).map_err(Error::stage("polish"))?;
        v_reduced = out.v;
        (out.accepted, out.residual)
    } else {
        (false, f64::NAN)
    };

    // Compose: U_total = U_V · (V_reduced ⊕ I).
    let mut w = DMatrix::<f64>::identity(d, d);
    w.view_mut((0, 0), (d1, d1)).copy_from(&v_reduced);
    let u_total = OrthogonalTransform::new(red.u_v.matrix() * w)?;

    let patterns_by_eta = patterns_at_etas(&samples.hessians, u_total.matrix(), &cfg.etas)?;
    Ok(PipelineResult {
        u_total,
        d1,
        singular_values: red.singular_values,
        border_residual: reduced.border_residual,
        structure,
        off_block_residual,
        block_runs,
        polished,
        polish_residual,
        patterns_by_eta,
    })
}

/// Sparsify a bare matrix set by direct minimization over SO(d) (no
/// gradient data, so the vertex and block stages are skipped — this is the
/// matrix-instance protocol).
pub fn sparsify_matrix_set(
    mats: &SymmetricMatrixSet,
    cfg: &PipelineConfig,
) -> Result<SparsifyResult> {
    validate_config(cfg)?;
    // Optimize over an orthonormal basis of the span: same minimizers,
    // cost capped at the span dimension, and on noisy data the truncation
    // discards noise directions outside the signal span.
    let basis = if mats.dim() > 1 {
        span_orthonormal_basis(mats, cfg.span_tau_rel)
            .map_err(Error::stage("span reduction"))?
            .basis
    } else {
        mats.clone()
    };
    let mut opt_cfg = cfg.optimizer;
    opt_cfg.seed = derive_seed(cfg.seed, 0x5a);
    let (u0, init) = match &cfg.grid {
        Some(grid) if grid_cardinality(mats.dim(), grid.h)? <= grid.max_points => {
            let res = grid_search(&basis, grid, &cfg.loss)?;
            (res.u, InitKind::Grid)
        }
        _ => {
            let res = random_init(&basis, &opt_cfg, &cfg.loss, cfg.random_candidates)?;
            (res.u, InitKind::Random)
        }
    };
    let (mut u, trajectory) = match opt_cfg.method {
        OptimizerMethod::Rgd => rgd_minimize(&basis, &u0, &opt_cfg, &cfg.loss)?,
        OptimizerMethod::Landing => landing_minimize(&basis, &u0, &opt_cfg, &cfg.loss)?,
    };
    let final_loss = trajectory.final_stat().loss;
    let (polished, polish_residual) = if cfg.polish {
        let out = polish_support(&basis, &u).map_err(Error::stage("polish"))?;
        u = out.v;
        (out.accepted, out.residual)
    } else {
        (false, f64::NAN)
    };
    let patterns_by_eta = patterns_at_etas(mats, &u, &cfg.etas)?;
    Ok(SparsifyResult {
        u: OrthogonalTransform::new(u)?,
        init,
        trajectory,
        final_loss,
        polished,
        polish_residual,
        patterns_by_eta,
    })
}

/// Sparsity gap χ(U, η): the ‖·‖₀-style ordered entry count (2·|off-diag|
/// + |diag|) of the thresholded mean-|entry| matrix of UᵀH_nU, minus the
/// same count for the ground-truth support. 0 is exact recovery; positive
/// means residual couplings; negative means over-sparsification (entries
/// of the truth fell below η).
pub fn sparsity_gap(
    u: &OrthogonalTransform,
    mats: &SymmetricMatrixSet,
    truth: &SparsityPattern,
    eta: f64,
) -> Result<i64> {
    let conj = mats.conjugated(u.matrix())?;
    let recovered = pattern_from_matrix_set(&conj, eta)?;
    Ok(recovered.ordered_count() as i64 - truth.ordered_count() as i64)
}

/// Mean failure score over trials: a trial scores min{1, χ} when χ ≥ 0 and
/// 1 when χ < 0 (over-sparsification counts as full failure; the source
/// metric leaves this case open).
pub fn failure_ratio(gaps: &[i64]) -> Result<f64> {
    if gaps.is_empty() {
        return Err(Error::EmptyInput("failure ratio over no trials".into()));
    }
    let total: f64 = gaps
        .iter()
        .map(|&chi| {
            if chi < 0 {
                1.0
            } else {
                chi.min(1) as f64
            }
        })
        .sum();
    Ok(total / gaps.len() as f64)
}
