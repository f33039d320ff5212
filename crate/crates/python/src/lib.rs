//! Python bindings over plain nested lists: instance generation, the
//! sparsification pipeline, recovery metrics, and the benchmark/term-norm
//! helpers. All indices on this surface are 0-based (unlike the 1-based
//! on-disk JSON convention of the CLI).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sparsedec::decomposition::{
    anova_term_norm, derivative_smallness_counts, PNorm, QuadratureSpec, SampledFunction,
};
use sparsedec::graphs::{pattern_from_matrix_set, SparsityPattern};
use sparsedec::instance::{matrices_from_rows, matrices_to_rows, matrix_from_rows, matrix_to_rows};
use sparsedec::manifold::{sparsity_loss as loss_fn, GridConfig, LossConfig, OptimizerMethod};
use sparsedec::pipeline::{self, FunctionSamples, InitKind, PipelineConfig};
use sparsedec::testgen::{
    builtin_benchmark, builtin_benchmark_noisy, builtin_benchmark_rotated, gen_matrix_set,
    random_pattern, random_pattern_sized, BenchmarkId, FunctionSpec, MatrixInstanceSpec,
};
use sparsedec::types::{derive_seed, rng_from_seed, OrthogonalTransform, SymmetricMatrixSet};
use sparsedec::vertex_min::GradientSample;
use sparsedec::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Stage { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_set(matrices: &[Vec<Vec<f64>>]) -> PyResult<SymmetricMatrixSet> {
    matrices_from_rows(matrices).map_err(err)
}

fn to_transform(u: &[Vec<f64>]) -> PyResult<OrthogonalTransform> {
    let m = matrix_from_rows(u).map_err(err)?;
    OrthogonalTransform::new(m).map_err(err)
}

fn pattern_pairs(p: &SparsityPattern) -> (Vec<(usize, usize)>, Vec<usize>) {
    (
        p.off_diag().iter().copied().collect(),
        p.diag().iter().copied().collect(),
    )
}

fn build_pattern(d: usize, off_diag: Vec<(usize, usize)>, diag: Vec<usize>) -> PyResult<SparsityPattern> {
    SparsityPattern::new(d, off_diag, diag).map_err(err)
}

fn parse_norm(p: &str) -> PyResult<PNorm> {
    match p {
        "inf" | "Inf" | "infinity" => Ok(PNorm::Infinity),
        "1" | "one" => Ok(PNorm::One),
        other => Err(PyValueError::new_err(format!(
            "unknown norm {other:?} (expected \"inf\" or \"1\")"
        ))),
    }
}

fn parse_benchmark(which: &str) -> PyResult<BenchmarkId> {
    match which {
        "f1" | "F1" => Ok(BenchmarkId::One),
        "f2" | "F2" => Ok(BenchmarkId::Two),
        other => other.parse().map_err(err),
    }
}

fn realize_benchmark(which: &str, rotation_seed: Option<u64>, noisy: bool) -> PyResult<SampledFunction> {
    let id = parse_benchmark(which)?;
    match (noisy, rotation_seed) {
        (true, seed) => builtin_benchmark_noisy(id, seed.unwrap_or(0)).map_err(err),
        (false, Some(seed)) => builtin_benchmark_rotated(id, seed).map_err(err),
        (false, None) => Ok(builtin_benchmark(id)),
    }
}

fn init_label(kind: &InitKind) -> String {
    match kind {
        InitKind::Identity => "identity",
        InitKind::Grid => "grid",
        InitKind::Random => "random",
    }
    .to_string()
}

/// Recovered pattern per threshold as `(eta, off_diag, diag)` tuples.
type EtaPatterns = Vec<(f64, Vec<(usize, usize)>, Vec<usize>)>;

fn eta_patterns(list: &[(f64, SparsityPattern)]) -> EtaPatterns {
    list.iter()
        .map(|(eta, p)| {
            let (off, diag) = pattern_pairs(p);
            (*eta, off, diag)
        })
        .collect()
}

fn build_config(
    d: usize,
    init: &str,
    grid_h: f64,
    method: &str,
    noisy: bool,
    etas: Option<Vec<f64>>,
    seed: u64,
) -> PyResult<PipelineConfig> {
    let mut cfg = if noisy {
        PipelineConfig::noisy(d)
    } else {
        PipelineConfig::default()
    };
    cfg.grid = match init {
        "grid" => Some(GridConfig::new(grid_h)),
        "random" => None,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown init {other:?} (expected \"grid\" or \"random\")"
            )))
        }
    };
    cfg.optimizer.method = match method {
        "rgd" => OptimizerMethod::Rgd,
        "landing" => OptimizerMethod::Landing,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown method {other:?} (expected \"rgd\" or \"landing\")"
            )))
        }
    };
    if let Some(e) = etas {
        cfg.etas = e;
    }
    cfg.seed = seed;
    Ok(cfg)
}

/// A generated matrix set with its hidden rotation and true support.
#[pyclass(get_all, frozen)]
struct MatrixInstance {
    matrices: Vec<Vec<Vec<f64>>>,
    rotation: Vec<Vec<f64>>,
    pattern_off_diag: Vec<(usize, usize)>,
    pattern_diag: Vec<usize>,
}

/// Generate a jointly sparsifiable matrix set: sparse representatives with
/// uniform entries on a random support, conjugated by a hidden rotation,
/// plus optional entrywise Gaussian noise.
#[pyfunction]
#[pyo3(signature = (d, j_size=None, n=None, sigma=0.0, seed=0))]
fn gen_matrix_instance(
    d: usize,
    j_size: Option<usize>,
    n: Option<usize>,
    sigma: f64,
    seed: u64,
) -> PyResult<MatrixInstance> {
    let pattern_seed = derive_seed(seed, 0x3a77);
    let pattern = match j_size {
        Some(size) => random_pattern_sized(d, size, pattern_seed).map_err(err)?,
        None => random_pattern(d, pattern_seed).map_err(err)?,
    };
    let spec = MatrixInstanceSpec::new(
        d,
        pattern,
        n.unwrap_or(100 * d),
        derive_seed(seed, 0x0707),
        derive_seed(seed, 0x0e77),
        sigma,
    )
    .map_err(err)?;
    let (set, truth) = gen_matrix_set(&spec).map_err(err)?;
    let (pattern_off_diag, pattern_diag) = pattern_pairs(&truth.pattern);
    Ok(MatrixInstance {
        matrices: matrices_to_rows(&set),
        rotation: matrix_to_rows(&truth.rotation),
        pattern_off_diag,
        pattern_diag,
    })
}

/// Result of sparsifying a bare matrix set.
#[pyclass(get_all, frozen)]
struct SparsifyOutcome {
    u: Vec<Vec<f64>>,
    init: String,
    final_loss: f64,
    iterations: usize,
    polished: bool,
    patterns_by_eta: EtaPatterns,
}

/// Find U minimizing the smoothed joint-sparsity loss of `UᵀH_nU` over the
/// rotation group (grid or random-restart initialization, then descent).
#[pyfunction]
#[pyo3(signature = (matrices, init="grid", grid_h=0.25, method="rgd", noisy=false, etas=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn sparsify_matrices(
    matrices: Vec<Vec<Vec<f64>>>,
    init: &str,
    grid_h: f64,
    method: &str,
    noisy: bool,
    etas: Option<Vec<f64>>,
    seed: u64,
) -> PyResult<SparsifyOutcome> {
    let set = to_set(&matrices)?;
    let cfg = build_config(set.dim(), init, grid_h, method, noisy, etas, seed)?;
    let res = pipeline::sparsify_matrix_set(&set, &cfg).map_err(err)?;
    Ok(SparsifyOutcome {
        u: matrix_to_rows(res.u.matrix()),
        init: init_label(&res.init),
        final_loss: res.final_loss,
        iterations: res.trajectory.final_stat().iter,
        polished: res.polished,
        patterns_by_eta: eta_patterns(&res.patterns_by_eta),
    })
}

/// Sampled derivatives of a generated sparse additive function.
#[pyclass(get_all, frozen)]
struct FunctionSampleSet {
    d: usize,
    /// One gradient per row.
    gradients: Vec<Vec<f64>>,
    hessians: Vec<Vec<Vec<f64>>>,
    /// Sample points, one per row (shared by gradients and Hessians).
    points: Vec<Vec<f64>>,
    truth_off_diag: Vec<(usize, usize)>,
    truth_diag: Vec<usize>,
    /// Component sizes of the true coupling graph.
    truth_profile: Vec<usize>,
}

/// Generate a random sparse additive function (coordinates partitioned
/// into coupled components), hide it behind a rotation, and sample its
/// gradients/Hessians at uniform points.
#[pyfunction]
#[pyo3(signature = (d, seed, n=None, rotate=true, noisy=false))]
fn gen_function_samples(
    d: usize,
    seed: u64,
    n: Option<usize>,
    rotate: bool,
    noisy: bool,
) -> PyResult<FunctionSampleSet> {
    let mut spec = FunctionSpec::random(d, seed).map_err(err)?;
    if rotate {
        spec = spec.with_rotation_seed(derive_seed(seed, 0x0707));
    }
    spec = spec.with_noise(noisy);
    let f = spec.realize().map_err(err)?;
    let samples =
        FunctionSamples::from_function(&f, n.unwrap_or(100 * d), derive_seed(seed, 0x57e9))
            .map_err(err)?;
    let truth = f.ground_truth().expect("generated functions carry truth");
    let (truth_off_diag, truth_diag) = pattern_pairs(&truth.pattern);
    let b = samples.gradients.matrix();
    Ok(FunctionSampleSet {
        d,
        gradients: (0..b.ncols())
            .map(|k| b.column(k).iter().copied().collect())
            .collect(),
        hessians: matrices_to_rows(&samples.hessians),
        points: samples
            .gradients
            .points()
            .iter()
            .map(|x| x.iter().copied().collect())
            .collect(),
        truth_off_diag,
        truth_diag,
        truth_profile: truth.components.profile(),
    })
}

/// Result of the full three-stage pipeline.
#[pyclass(get_all, frozen)]
struct PipelineOutcome {
    u_total: Vec<Vec<f64>>,
    d1: usize,
    profile: Vec<usize>,
    singular_values: Vec<f64>,
    block_inits: Vec<String>,
    block_losses: Vec<f64>,
    polished: bool,
    patterns_by_eta: EtaPatterns,
}

/// Run the full pipeline on sampled derivatives: active-subspace
/// reduction from gradients, error-controlled block diagonalization of
/// the Hessians, and per-block sparsity minimization.
///
/// `gradients` holds one gradient per row; `hessians` are the matching
/// row-major Hessians; `points` (optional) are the shared sample points.
#[pyfunction]
#[pyo3(signature = (gradients, hessians, points=None, init="grid", grid_h=0.25, method="rgd", noisy=false, etas=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    gradients: Vec<Vec<f64>>,
    hessians: Vec<Vec<Vec<f64>>>,
    points: Option<Vec<Vec<f64>>>,
    init: &str,
    grid_h: f64,
    method: &str,
    noisy: bool,
    etas: Option<Vec<f64>>,
    seed: u64,
) -> PyResult<PipelineOutcome> {
    if gradients.is_empty() {
        return Err(PyValueError::new_err("empty gradient sample"));
    }
    let n = gradients.len();
    let d = gradients[0].len();
    let mut b = nalgebra::DMatrix::zeros(d, n);
    for (k, g) in gradients.iter().enumerate() {
        if g.len() != d {
            return Err(PyValueError::new_err(format!(
                "gradient {k} has length {}, expected {d}",
                g.len()
            )));
        }
        for (i, &v) in g.iter().enumerate() {
            b[(i, k)] = v;
        }
    }
    let pts: Vec<nalgebra::DVector<f64>> = match points {
        Some(p) => p.into_iter().map(nalgebra::DVector::from_vec).collect(),
        None => vec![nalgebra::DVector::zeros(d); n],
    };
    let grads = GradientSample::new(b, pts).map_err(err)?;
    let samples = FunctionSamples::new(grads, to_set(&hessians)?).map_err(err)?;
    let cfg = build_config(d, init, grid_h, method, noisy, etas, seed)?;
    let res = pipeline::run_pipeline(&samples, &cfg).map_err(err)?;
    Ok(PipelineOutcome {
        u_total: matrix_to_rows(res.u_total.matrix()),
        d1: res.d1,
        profile: res.structure.profile(),
        singular_values: res.singular_values.clone(),
        block_inits: res.block_runs.iter().map(|r| init_label(&r.init)).collect(),
        block_losses: res.block_runs.iter().map(|r| r.final_loss).collect(),
        polished: res.polished,
        patterns_by_eta: eta_patterns(&res.patterns_by_eta),
    })
}

/// Support of the mean absolute entry matrix of a set at threshold `eta`,
/// as `(off_diag_pairs, diag_indices)`.
#[pyfunction]
fn pattern_from_matrices(
    matrices: Vec<Vec<Vec<f64>>>,
    eta: f64,
) -> PyResult<(Vec<(usize, usize)>, Vec<usize>)> {
    let set = to_set(&matrices)?;
    let p = pattern_from_matrix_set(&set, eta).map_err(err)?;
    Ok(pattern_pairs(&p))
}

/// Sparsity gap χ(U, η): ordered support size of the conjugated set at
/// threshold η minus the true ordered support size (0 = exact recovery).
#[pyfunction]
fn sparsity_gap(
    u: Vec<Vec<f64>>,
    matrices: Vec<Vec<Vec<f64>>>,
    truth_off_diag: Vec<(usize, usize)>,
    truth_diag: Vec<usize>,
    eta: f64,
) -> PyResult<i64> {
    let set = to_set(&matrices)?;
    let transform = to_transform(&u)?;
    let truth = build_pattern(set.dim(), truth_off_diag, truth_diag)?;
    pipeline::sparsity_gap(&transform, &set, &truth, eta).map_err(err)
}

/// Mean failure score of a batch of sparsity gaps (χ ≥ 1 or χ < 0 count
/// as failures, capped at 1 per trial).
#[pyfunction]
fn failure_ratio(gaps: Vec<i64>) -> PyResult<f64> {
    pipeline::failure_ratio(&gaps).map_err(err)
}

/// The smoothed joint-sparsity loss of `UᵀH_nU` (diagonal-inclusive
/// normalization, as used by the pipeline).
#[pyfunction]
#[pyo3(signature = (matrices, u, epsilon=1e-8))]
fn sparsity_loss(matrices: Vec<Vec<Vec<f64>>>, u: Vec<Vec<f64>>, epsilon: f64) -> PyResult<f64> {
    let set = to_set(&matrices)?;
    let um = matrix_from_rows(&u).map_err(err)?;
    if um.nrows() != set.dim() || um.ncols() != set.dim() {
        return Err(PyValueError::new_err(format!(
            "U is {}x{}, expected {}x{}",
            um.nrows(),
            um.ncols(),
            set.dim(),
            set.dim()
        )));
    }
    let loss_cfg = LossConfig::diagonal_inclusive().with_epsilon(epsilon);
    Ok(loss_fn(&set, &um, &loss_cfg))
}

/// Derivative smallness counts (G, H) of a built-in benchmark: the number
/// of coordinates with negligible first derivative and of pairs with
/// negligible mixed second derivative.
#[pyfunction]
#[pyo3(signature = (which, p="inf", tol=1e-4, n_points=2000, seed=0, rotation_seed=None, noisy=false))]
#[allow(clippy::too_many_arguments)]
fn benchmark_derivative_counts(
    which: &str,
    p: &str,
    tol: f64,
    n_points: usize,
    seed: u64,
    rotation_seed: Option<u64>,
    noisy: bool,
) -> PyResult<(usize, usize)> {
    let f = realize_benchmark(which, rotation_seed, noisy)?;
    let mut rng = rng_from_seed(seed);
    let points: Vec<_> = (0..n_points).map(|_| f.domain().sample(&mut rng)).collect();
    derivative_smallness_counts(&f, &points, parse_norm(p)?, tol).map_err(err)
}

/// Monte Carlo estimate of the ANOVA term norm ‖f_u‖_p of a built-in
/// benchmark (0-based subset).
#[pyfunction]
#[pyo3(signature = (which, subset, p="inf", n_points=500, quad_points=100, seed=0, rotation_seed=None, noisy=false))]
#[allow(clippy::too_many_arguments)]
fn benchmark_term_norm(
    which: &str,
    subset: Vec<usize>,
    p: &str,
    n_points: usize,
    quad_points: usize,
    seed: u64,
    rotation_seed: Option<u64>,
    noisy: bool,
) -> PyResult<f64> {
    let f = realize_benchmark(which, rotation_seed, noisy)?;
    let quad = QuadratureSpec::monte_carlo(quad_points, derive_seed(seed, 0x009d));
    anova_term_norm(&f, &subset, parse_norm(p)?, n_points, &quad, seed).map_err(err)
}

#[pymodule]
fn _sparsedec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<MatrixInstance>()?;
    m.add_class::<SparsifyOutcome>()?;
    m.add_class::<FunctionSampleSet>()?;
    m.add_class::<PipelineOutcome>()?;
    m.add_function(wrap_pyfunction!(gen_matrix_instance, m)?)?;
    m.add_function(wrap_pyfunction!(sparsify_matrices, m)?)?;
    m.add_function(wrap_pyfunction!(gen_function_samples, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(pattern_from_matrices, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity_gap, m)?)?;
    m.add_function(wrap_pyfunction!(failure_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity_loss, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_derivative_counts, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_term_norm, m)?)?;
    Ok(())
}
