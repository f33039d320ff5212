//! Batch command-line interface: instance generation (`gen`), pipeline
//! runs (`sparsify`), additive-decomposition analysis (`anova`), and
//! aggregation of run reports (`report`).
//!
//! Conventions shared by every subcommand:
//! - Outputs are deterministic given flags and seeds; rerunning a command
//!   writes byte-identical data files. The per-run manifest
//!   (`<output stem>.manifest.json`) records the command line, a
//!   configuration hash, seeds, file lineage, and per-stage wall-clock
//!   timings — the timings make manifests the one artifact that varies
//!   between reruns.
//! - JSON data files reference their manifest by file name; CSV outputs
//!   are tied to theirs by the same stem convention.
//! - Exit codes: 0 success, 2 invalid input (bad flags, malformed or
//!   missing files), 3 pipeline stage failure.
//! - Configuration precedence: command-line flags override the optional
//!   `--config` JSON file, which overrides built-in defaults (noisy
//!   instances start from the noise-adapted preset).
//! - `--jobs k` caps the worker threads used for parallel sections
//!   (per-block optimization, grid search, subset estimates); results do
//!   not depend on the worker count.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::{
    anova_term_norm, term_bound, PNorm, QuadratureSpec, SampledFunction, TermBoundKind,
    TermVolumes,
};
use crate::error::{Error, Result};
use crate::instance::{
    config_hash, manifest_path, matrices_from_rows, matrices_to_rows, matrix_from_rows,
    matrix_to_rows, read_json, write_json, BlockReport, EtaChi, EtaPattern, FunctionInstanceFile,
    FunctionSource, GroundTruthFile, MatrixInstanceFile, RunManifest, SparsifyReport, TermNormRow,
    FUNCTION_INSTANCE_KIND, INDEX_BASE, MATRIX_INSTANCE_KIND, TERM_CSV_HEADER,
};
use crate::manifold::{GridConfig, OptimizerMethod};
use crate::pipeline::{
    run_pipeline, sparsify_matrix_set, sparsity_gap, FunctionSamples, InitKind, PipelineConfig,
};
use crate::testgen::{
    builtin_benchmark, builtin_benchmark_noisy, builtin_benchmark_rotated, gen_matrix_set,
    random_pattern, random_pattern_sized, BenchmarkId, FunctionSpec, MatrixInstanceSpec,
};
use crate::types::{derive_seed, rng_from_seed};

/// Seed streams derived from the master seed, one per purpose, so a single
/// `--seed` drives every stage reproducibly.
const STREAM_PATTERN: u64 = 0x3a77;
const STREAM_ROTATION: u64 = 0x0707;
const STREAM_ENTRIES: u64 = 0x0e77;
const STREAM_SAMPLES: u64 = 0x57e9;
const STREAM_DERIV_POINTS: u64 = 0x00b0;
const STREAM_QUADRATURE: u64 = 0x009d;

#[derive(Debug, Parser)]
#[command(
    name = "sparsedec",
    version,
    about = "Find an orthogonal change of variables that makes sampled functions and symmetric matrix sets jointly sparse"
)]
pub struct Cli {
    /// Worker threads for parallel sections (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate replayable instance files.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Run the sparsification pipeline on an instance file.
    Sparsify(SparsifyArgs),
    /// Estimate additive-decomposition term norms with derivative bounds.
    Anova(AnovaArgs),
    /// Aggregate sparsify reports into a tidy CSV table.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum GenCommand {
    /// A jointly sparsifiable symmetric matrix set, conjugated by a hidden
    /// rotation, with the ground truth recorded.
    Matrices(GenMatricesArgs),
    /// A random sparse additive function, rotated and sampled.
    Function(GenFunctionArgs),
    /// One of the two built-in 7-dimensional benchmark functions.
    Builtin(GenBuiltinArgs),
}

#[derive(Debug, Args)]
pub struct GenMatricesArgs {
    /// Ambient dimension.
    #[arg(long)]
    pub d: usize,
    /// Joint support size |J| (distinct unordered entries, diagonal slots
    /// included); drawn uniformly in [1, protocol cap] when omitted.
    #[arg(long = "J-size")]
    pub j_size: Option<usize>,
    /// Number of matrices (default 100·d).
    #[arg(long = "N")]
    pub n: Option<usize>,
    /// Entrywise Gaussian noise level.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output instance file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenFunctionArgs {
    /// Ambient dimension.
    #[arg(long)]
    pub d: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add the smooth low-amplitude perturbation.
    #[arg(long)]
    pub noisy: bool,
    /// Keep the sparse coordinates instead of hiding them behind a random
    /// rotation.
    #[arg(long = "no-rotate")]
    pub no_rotate: bool,
    /// Sample points for gradients/Hessians (default 100·d).
    #[arg(long = "n-points")]
    pub n_points: Option<usize>,
    /// Output instance file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenBuiltinArgs {
    /// Benchmark name: f1 or f2.
    #[arg(long)]
    pub which: String,
    /// Hide the coordinates behind a seeded random rotation.
    #[arg(long)]
    pub rotate: bool,
    /// Add the smooth perturbation (implies --rotate).
    #[arg(long)]
    pub noisy: bool,
    /// Rotation seed; sampling seeds derive from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample points for gradients/Hessians (default 100·d = 700).
    #[arg(long = "n-points")]
    pub n_points: Option<usize>,
    /// Output instance file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitChoice {
    /// Exhaustive rotation-angle lattice.
    Grid,
    /// Best of several random starts after a fixed iteration budget.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    /// Riemannian gradient descent with QR retractions.
    Rgd,
    /// Landing flow with an orthogonality penalty.
    Landing,
}

#[derive(Debug, Args)]
pub struct SparsifyArgs {
    /// Instance file produced by `gen`.
    #[arg(long)]
    pub input: PathBuf,
    /// Output report (default `<input stem>.report.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON configuration file; explicit flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Initialization strategy (default grid).
    #[arg(long, value_enum)]
    pub init: Option<InitChoice>,
    /// Grid spacing for `--init grid` (default 0.25).
    #[arg(long)]
    pub h: Option<f64>,
    /// Optimizer (default rgd).
    #[arg(long, value_enum)]
    pub method: Option<MethodChoice>,
    /// Base step size.
    #[arg(long)]
    pub nu: Option<f64>,
    /// Orthogonality-penalty weight of the landing flow.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated report thresholds, e.g. `1e-9,1e-4`.
    #[arg(long)]
    pub eta: Option<String>,
    /// Smoothing constant of the sparsity loss.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
    /// Singular-value cutoff of the active-subspace stage, relative to
    /// the largest singular value.
    #[arg(long = "tau-rel")]
    pub tau_rel: Option<f64>,
    /// Block-splitting tolerance, relative to the Frobenius scale.
    #[arg(long = "delta-rel")]
    pub delta_rel: Option<f64>,
    /// Span-basis truncation threshold, relative to the largest singular
    /// value.
    #[arg(long = "span-tau-rel")]
    pub span_tau_rel: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip the machine-precision support polish.
    #[arg(long = "no-polish")]
    pub no_polish: bool,
    /// Restart count for random initialization.
    #[arg(long = "random-candidates")]
    pub random_candidates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnovaArgs {
    /// Function-instance file produced by `gen function`/`gen builtin`.
    #[arg(long, conflicts_with = "builtin", required_unless_present = "builtin")]
    pub input: Option<PathBuf>,
    /// Analyze a built-in benchmark directly: f1 or f2.
    #[arg(long)]
    pub builtin: Option<String>,
    /// Rotate the built-in benchmark with this seed.
    #[arg(long = "rotation-seed")]
    pub rotation_seed: Option<u64>,
    /// Use the perturbed variant of the built-in benchmark.
    #[arg(long)]
    pub noisy: bool,
    /// Largest subset order |u| to enumerate.
    #[arg(long = "max-order", default_value_t = 2)]
    pub max_order: usize,
    /// Comma-separated norms to estimate: `inf`, `1`.
    #[arg(long, default_value = "inf")]
    pub p: String,
    /// Sample points per norm estimate.
    #[arg(long = "n-samples", default_value_t = 2000)]
    pub n_samples: usize,
    /// Monte Carlo anchor draws per sample point.
    #[arg(long = "quad-samples", default_value_t = 200)]
    pub quad_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV of term-norm rows.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Sparsify report files to aggregate.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Restrict to one dimension, e.g. `dim4`.
    #[arg(long)]
    pub table: Option<String>,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Optional overrides loaded from `--config` (same knobs as the flags).
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SparsifyFileConfig {
    init: Option<InitChoice>,
    h: Option<f64>,
    method: Option<MethodChoice>,
    nu: Option<f64>,
    lambda: Option<f64>,
    eta: Option<Vec<f64>>,
    epsilon: Option<f64>,
    max_iters: Option<usize>,
    tau_rel: Option<f64>,
    delta_rel: Option<f64>,
    span_tau_rel: Option<f64>,
    seed: Option<u64>,
    polish: Option<bool>,
    random_candidates: Option<usize>,
}

/// The fully resolved run configuration, embedded in every report (and
/// hashed into the manifest) so aggregation can group runs by their exact
/// settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedRunConfig {
    pub mode: String,
    pub d: usize,
    /// Whether the instance is perturbed (selects the noise-adapted
    /// preset as the default layer).
    pub noisy: bool,
    pub init: String,
    /// Grid spacing (absent for random initialization).
    pub h: Option<f64>,
    pub method: String,
    pub nu: f64,
    pub lambda: f64,
    pub etas: Vec<f64>,
    pub epsilon: f64,
    pub max_iters: usize,
    pub tau_rel: f64,
    pub delta_rel: f64,
    pub span_tau_rel: f64,
    pub polish: bool,
    pub random_candidates: usize,
    pub seed: u64,
}

fn parse_eta_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad threshold {s:?}: {e}")))
        })
        .collect()
}

fn parse_norm_list(text: &str) -> Result<Vec<PNorm>> {
    text.split(',')
        .map(|s| match s.trim() {
            "inf" | "Inf" | "infinity" => Ok(PNorm::Infinity),
            "1" | "one" => Ok(PNorm::One),
            other => Err(Error::InvalidArgument(format!(
                "unknown norm {other:?} (expected inf or 1)"
            ))),
        })
        .collect()
}

fn parse_benchmark(text: &str) -> Result<BenchmarkId> {
    match text {
        "f1" | "F1" => Ok(BenchmarkId::One),
        "f2" | "F2" => Ok(BenchmarkId::Two),
        other => other.parse(),
    }
}

/// Merge defaults (noise-adapted preset when the instance is perturbed),
/// the optional config file, and explicit flags, in increasing precedence.
fn resolve_config(
    args: &SparsifyArgs,
    mode: &str,
    d: usize,
    noisy: bool,
) -> Result<(PipelineConfig, ResolvedRunConfig)> {
    let file: SparsifyFileConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => SparsifyFileConfig::default(),
    };
    let mut cfg = if noisy {
        PipelineConfig::noisy(d)
    } else {
        PipelineConfig::default()
    };

    let init = args.init.or(file.init).unwrap_or(InitChoice::Grid);
    let default_h = cfg.grid.as_ref().map(|g| g.h).unwrap_or(0.25);
    let h = args.h.or(file.h).unwrap_or(default_h);
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "grid spacing must be positive and finite, got {h}"
        )));
    }
    cfg.grid = match init {
        InitChoice::Grid => Some(GridConfig::new(h)),
        InitChoice::Random => None,
    };
    let method = args.method.or(file.method).unwrap_or(MethodChoice::Rgd);
    cfg.optimizer.method = match method {
        MethodChoice::Rgd => OptimizerMethod::Rgd,
        MethodChoice::Landing => OptimizerMethod::Landing,
    };
    if let Some(nu) = args.nu.or(file.nu) {
        cfg.optimizer.step_size = nu;
    }
    if let Some(lambda) = args.lambda.or(file.lambda) {
        cfg.optimizer.landing_weight = lambda;
    }
    if let Some(iters) = args.max_iters.or(file.max_iters) {
        cfg.optimizer.max_iters = iters;
    }
    let etas = match &args.eta {
        Some(text) => parse_eta_list(text)?,
        None => file.eta.clone().unwrap_or_else(|| cfg.etas.clone()),
    };
    if etas.is_empty() {
        return Err(Error::EmptyInput("report threshold list".into()));
    }
    cfg.etas = etas;
    if let Some(eps) = args.epsilon.or(file.epsilon) {
        cfg.loss = cfg.loss.with_epsilon(eps);
    }
    if let Some(t) = args.tau_rel.or(file.tau_rel) {
        cfg.tau_rel = t;
    }
    if let Some(t) = args.delta_rel.or(file.delta_rel) {
        cfg.delta_rel = t;
    }
    if let Some(t) = args.span_tau_rel.or(file.span_tau_rel) {
        cfg.span_tau_rel = t;
    }
    if args.no_polish {
        cfg.polish = false;
    } else if let Some(p) = file.polish {
        cfg.polish = p;
    }
    if let Some(c) = args.random_candidates.or(file.random_candidates) {
        cfg.random_candidates = c;
    }
    cfg.seed = args.seed.or(file.seed).unwrap_or(cfg.seed);

    let resolved = ResolvedRunConfig {
        mode: mode.to_string(),
        d,
        noisy,
        init: match init {
            InitChoice::Grid => "grid".into(),
            InitChoice::Random => "random".into(),
        },
        h: matches!(init, InitChoice::Grid).then_some(h),
        method: match method {
            MethodChoice::Rgd => "rgd".into(),
            MethodChoice::Landing => "landing".into(),
        },
        nu: cfg.optimizer.step_size,
        lambda: cfg.optimizer.landing_weight,
        etas: cfg.etas.clone(),
        epsilon: cfg.loss.epsilon,
        max_iters: cfg.optimizer.max_iters,
        tau_rel: cfg.tau_rel,
        delta_rel: cfg.delta_rel,
        span_tau_rel: cfg.span_tau_rel,
        polish: cfg.polish,
        random_candidates: cfg.random_candidates,
        seed: cfg.seed,
    };
    Ok((cfg, resolved))
}

fn init_name(kind: &InitKind) -> &'static str {
    match kind {
        InitKind::Identity => "identity",
        InitKind::Grid => "grid",
        InitKind::Random => "random",
    }
}

/// The invoked command line with the program path normalized, recorded in
/// manifests.
fn command_line() -> String {
    let mut parts: Vec<String> = std::env::args().collect();
    if !parts.is_empty() {
        parts[0] = "sparsedec".into();
    }
    parts.join(" ")
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(Error::io(&format!("writing {}", path.display())))
}

/// File-name (not path) of the manifest belonging to `out`, as embedded in
/// data files.
fn manifest_name(out: &Path) -> String {
    manifest_path(out)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run.manifest.json".into())
}

fn cmd_gen_matrices(args: &GenMatricesArgs) -> Result<()> {
    let t0 = Instant::now();
    let pattern_seed = derive_seed(args.seed, STREAM_PATTERN);
    let pattern = match args.j_size {
        Some(size) => random_pattern_sized(args.d, size, pattern_seed)?,
        None => random_pattern(args.d, pattern_seed)?,
    };
    let rotation_seed = derive_seed(args.seed, STREAM_ROTATION);
    let entry_seed = derive_seed(args.seed, STREAM_ENTRIES);
    let n = args.n.unwrap_or(100 * args.d);
    let spec = MatrixInstanceSpec::new(args.d, pattern, n, rotation_seed, entry_seed, args.sigma)?;
    let (set, truth) = gen_matrix_set(&spec)?;
    let generate = t0.elapsed();

    let t1 = Instant::now();
    let file = MatrixInstanceFile {
        kind: MATRIX_INSTANCE_KIND.into(),
        manifest: manifest_name(&args.out),
        index_base: INDEX_BASE,
        spec,
        truth: GroundTruthFile {
            rotation: matrix_to_rows(&truth.rotation),
            pattern: truth.pattern,
        },
        matrices: matrices_to_rows(&set),
    };
    write_json(&args.out, &file)?;

    let mut manifest = RunManifest::new(command_line());
    manifest.config_hash = config_hash(&serde_json::json!({
        "d": args.d, "j_size": args.j_size, "n": n, "sigma": args.sigma, "seed": args.seed,
    }))?;
    manifest
        .seed("master", args.seed)
        .seed("pattern", pattern_seed)
        .seed("rotation", rotation_seed)
        .seed("entries", entry_seed)
        .output(&args.out)
        .timing("generate", generate)
        .timing("write", t1.elapsed());
    write_json(&manifest_path(&args.out), &manifest)
}

/// Build the instance record for one sampled function: derivatives at `n`
/// shared points plus whatever ground truth the function carries.
fn function_instance(
    f: &SampledFunction,
    source: FunctionSource,
    out: &Path,
    n: usize,
    sample_seed: u64,
) -> Result<FunctionInstanceFile> {
    let samples = FunctionSamples::from_function(f, n, sample_seed)?;
    let truth = f.ground_truth();
    Ok(FunctionInstanceFile {
        kind: FUNCTION_INSTANCE_KIND.into(),
        manifest: manifest_name(out),
        index_base: INDEX_BASE,
        source,
        d: samples.gradients.d(),
        sample_seed,
        truth_pattern: truth.map(|t| t.pattern.clone()),
        truth_profile: truth.map(|t| t.components.profile()),
        gradients: samples.gradients,
        hessians: matrices_to_rows(&samples.hessians),
    })
}

fn cmd_gen_function(args: &GenFunctionArgs) -> Result<()> {
    let t0 = Instant::now();
    let mut spec = FunctionSpec::random(args.d, args.seed)?;
    let rotation_seed = derive_seed(args.seed, STREAM_ROTATION);
    if !args.no_rotate {
        spec = spec.with_rotation_seed(rotation_seed);
    }
    spec = spec.with_noise(args.noisy);
    let f = spec.realize()?;
    let n = args.n_points.unwrap_or(100 * args.d);
    let sample_seed = derive_seed(args.seed, STREAM_SAMPLES);
    let file = function_instance(
        &f,
        FunctionSource::Generated { spec },
        &args.out,
        n,
        sample_seed,
    )?;
    let generate = t0.elapsed();

    let t1 = Instant::now();
    write_json(&args.out, &file)?;
    let mut manifest = RunManifest::new(command_line());
    manifest.config_hash = config_hash(&serde_json::json!({
        "d": args.d, "seed": args.seed, "noisy": args.noisy,
        "rotate": !args.no_rotate, "n_points": n,
    }))?;
    manifest.seed("master", args.seed).seed("samples", sample_seed);
    if !args.no_rotate {
        manifest.seed("rotation", rotation_seed);
    }
    manifest
        .output(&args.out)
        .timing("generate", generate)
        .timing("write", t1.elapsed());
    write_json(&manifest_path(&args.out), &manifest)
}

fn cmd_gen_builtin(args: &GenBuiltinArgs) -> Result<()> {
    let t0 = Instant::now();
    let which = parse_benchmark(&args.which)?;
    let rotated = args.rotate || args.noisy;
    let f = if args.noisy {
        builtin_benchmark_noisy(which, args.seed)?
    } else if args.rotate {
        builtin_benchmark_rotated(which, args.seed)?
    } else {
        builtin_benchmark(which)
    };
    let n = args.n_points.unwrap_or(100 * f.d());
    let sample_seed = derive_seed(args.seed, STREAM_SAMPLES);
    let source = FunctionSource::Builtin {
        which,
        rotation_seed: rotated.then_some(args.seed),
        noisy: args.noisy,
    };
    let file = function_instance(&f, source, &args.out, n, sample_seed)?;
    let generate = t0.elapsed();

    let t1 = Instant::now();
    write_json(&args.out, &file)?;
    let mut manifest = RunManifest::new(command_line());
    manifest.config_hash = config_hash(&serde_json::json!({
        "which": which.name(), "rotate": rotated, "noisy": args.noisy,
        "seed": args.seed, "n_points": n,
    }))?;
    manifest.seed("master", args.seed).seed("samples", sample_seed);
    if rotated {
        manifest.seed("rotation", args.seed);
    }
    manifest
        .output(&args.out)
        .timing("generate", generate)
        .timing("write", t1.elapsed());
    write_json(&manifest_path(&args.out), &manifest)
}

fn default_report_path(input: &Path) -> PathBuf {
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    input.with_file_name(format!("{stem}.report.json"))
}

/// Path of a trajectory CSV sitting next to `out`: `<stem><suffix>.traj.csv`.
fn traj_path(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}{suffix}.traj.csv"))
}

fn chi_table(
    u: &crate::types::OrthogonalTransform,
    mats: &crate::types::SymmetricMatrixSet,
    truth: &crate::graphs::SparsityPattern,
    etas: &[f64],
) -> Result<Vec<EtaChi>> {
    etas.iter()
        .map(|&eta| {
            Ok(EtaChi {
                eta,
                chi: sparsity_gap(u, mats, truth, eta)?,
            })
        })
        .collect()
}

fn cmd_sparsify(args: &SparsifyArgs) -> Result<()> {
    let t0 = Instant::now();
    let raw: serde_json::Value = read_json(&args.input)?;
    let kind = raw
        .get("kind")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| default_report_path(&args.input));
    let load = t0.elapsed();

    let (report, traj_files) = match kind.as_str() {
        MATRIX_INSTANCE_KIND => {
            let inst: MatrixInstanceFile = serde_json::from_value(raw)
                .map_err(Error::json(&format!("parsing {}", args.input.display())))?;
            sparsify_matrix_instance(args, &inst, &out)?
        }
        FUNCTION_INSTANCE_KIND => {
            let inst: FunctionInstanceFile = serde_json::from_value(raw)
                .map_err(Error::json(&format!("parsing {}", args.input.display())))?;
            sparsify_function_instance(args, &inst, &out)?
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unrecognized instance kind {other:?} in {}",
                args.input.display()
            )))
        }
    };
    let pipeline = t0.elapsed() - load;

    let t1 = Instant::now();
    write_json(&out, &report)?;
    let mut manifest = RunManifest::new(command_line());
    manifest.config_hash = config_hash(&report.config)?;
    manifest
        .seed("master", report.seed)
        .input(&args.input)
        .output(&out);
    for f in &traj_files {
        manifest.output(f);
    }
    manifest
        .timing("load", load)
        .timing("pipeline", pipeline)
        .timing("write", t1.elapsed());
    write_json(&manifest_path(&out), &manifest)
}

fn sparsify_matrix_instance(
    args: &SparsifyArgs,
    inst: &MatrixInstanceFile,
    out: &Path,
) -> Result<(SparsifyReport, Vec<PathBuf>)> {
    let mats = matrices_from_rows(&inst.matrices)?;
    let d = mats.dim();
    let (cfg, resolved) = resolve_config(args, "matrices", d, inst.spec.sigma > 0.0)?;
    let res = sparsify_matrix_set(&mats, &cfg)?;

    let truth_rotation = matrix_from_rows(&inst.truth.rotation)?;
    // Instances are H = Rᵀ H̃ R, so U = Rᵀ restores the sparse form.
    let u_truth = truth_rotation.transpose();
    let loss_gap = crate::manifold::sparsity_loss(&mats, res.u.matrix(), &cfg.loss)
        - crate::manifold::sparsity_loss(&mats, &u_truth, &cfg.loss);
    let chi_by_eta = chi_table(&res.u, &mats, &inst.truth.pattern, &cfg.etas)?;

    let traj = traj_path(out, "");
    write_text(&traj, &res.trajectory.to_csv())?;

    let report = SparsifyReport {
        manifest: manifest_name(out),
        config: serde_json::to_value(&resolved).map_err(Error::json("encoding configuration"))?,
        mode: "matrices".into(),
        d,
        d1: d,
        profile: vec![d],
        per_block: vec![BlockReport {
            size: d,
            init: init_name(&res.init).into(),
            final_loss: res.final_loss,
            iters: res.trajectory.final_stat().iter,
        }],
        patterns_by_eta: res
            .patterns_by_eta
            .iter()
            .map(|(eta, p)| EtaPattern {
                eta: *eta,
                pattern: p.clone(),
            })
            .collect(),
        chi_by_eta: Some(chi_by_eta),
        loss_gap: Some(loss_gap),
        polished: res.polished,
        polish_residual: (!res.polish_residual.is_nan()).then_some(res.polish_residual),
        singular_values: None,
        border_residual: None,
        off_block_residual: None,
        u_total: matrix_to_rows(res.u.matrix()),
        seed: cfg.seed,
    };
    Ok((report, vec![traj]))
}

fn sparsify_function_instance(
    args: &SparsifyArgs,
    inst: &FunctionInstanceFile,
    out: &Path,
) -> Result<(SparsifyReport, Vec<PathBuf>)> {
    let noisy = match &inst.source {
        FunctionSource::Generated { spec } => spec.with_noise,
        FunctionSource::Builtin { noisy, .. } => *noisy,
    };
    let hessians = matrices_from_rows(&inst.hessians)?;
    let samples = FunctionSamples::new(inst.gradients.clone(), hessians)?;
    let (cfg, resolved) = resolve_config(args, "function", inst.d, noisy)?;
    let res = run_pipeline(&samples, &cfg)?;

    let chi_by_eta = match &inst.truth_pattern {
        Some(truth) => Some(chi_table(&res.u_total, &samples.hessians, truth, &cfg.etas)?),
        None => None,
    };

    let mut traj_files = Vec::new();
    let mut per_block = Vec::with_capacity(res.block_runs.len());
    for (k, run) in res.block_runs.iter().enumerate() {
        if let Some(traj) = &run.trajectory {
            let path = traj_path(out, &format!(".block{k}"));
            write_text(&path, &traj.to_csv())?;
            traj_files.push(path);
        }
        per_block.push(BlockReport {
            size: run.indices.len(),
            init: init_name(&run.init).into(),
            final_loss: run.final_loss,
            iters: run.iters,
        });
    }

    let report = SparsifyReport {
        manifest: manifest_name(out),
        config: serde_json::to_value(&resolved).map_err(Error::json("encoding configuration"))?,
        mode: "function".into(),
        d: inst.d,
        d1: res.d1,
        profile: res.structure.profile(),
        per_block,
        patterns_by_eta: res
            .patterns_by_eta
            .iter()
            .map(|(eta, p)| EtaPattern {
                eta: *eta,
                pattern: p.clone(),
            })
            .collect(),
        chi_by_eta,
        loss_gap: None,
        polished: res.polished,
        polish_residual: (!res.polish_residual.is_nan()).then_some(res.polish_residual),
        singular_values: Some(res.singular_values.clone()),
        border_residual: Some(res.border_residual),
        off_block_residual: Some(res.off_block_residual),
        u_total: matrix_to_rows(res.u_total.matrix()),
        seed: cfg.seed,
    };
    Ok((report, traj_files))
}

/// Rebuild the callable function a set of samples came from.
fn realize_source(source: &FunctionSource) -> Result<SampledFunction> {
    match source {
        FunctionSource::Generated { spec } => spec.realize(),
        FunctionSource::Builtin {
            which,
            rotation_seed,
            noisy,
        } => match (noisy, rotation_seed) {
            (true, Some(seed)) => builtin_benchmark_noisy(*which, *seed),
            (true, None) => Err(Error::InvalidArgument(
                "perturbed built-in instances carry a rotation seed".into(),
            )),
            (false, Some(seed)) => builtin_benchmark_rotated(*which, *seed),
            (false, None) => Ok(builtin_benchmark(*which)),
        },
    }
}

/// All subsets of {0..d} with 1 ≤ |u| ≤ max_order, ordered by size then
/// lexicographically.
fn subsets_up_to(d: usize, max_order: usize) -> Vec<Vec<usize>> {
    let mut all = Vec::new();
    let mut current = Vec::new();
    for order in 1..=max_order.min(d) {
        fn rec(d: usize, order: usize, start: usize, current: &mut Vec<usize>, all: &mut Vec<Vec<usize>>) {
            if current.len() == order {
                all.push(current.clone());
                return;
            }
            for i in start..d {
                current.push(i);
                rec(d, order, i + 1, current, all);
                current.pop();
            }
        }
        rec(d, order, 0, &mut current, &mut all);
    }
    all
}

fn cmd_anova(args: &AnovaArgs) -> Result<()> {
    let t0 = Instant::now();
    let (f, input_path): (SampledFunction, Option<PathBuf>) = match (&args.input, &args.builtin) {
        (Some(path), None) => {
            let inst: FunctionInstanceFile = read_json(path)?;
            (realize_source(&inst.source)?, Some(path.clone()))
        }
        (None, Some(name)) => {
            let which = parse_benchmark(name)?;
            let source = FunctionSource::Builtin {
                which,
                rotation_seed: args
                    .rotation_seed
                    .or_else(|| args.noisy.then_some(0)),
                noisy: args.noisy,
            };
            (realize_source(&source)?, None)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "exactly one of --input and --builtin selects the function".into(),
            ))
        }
    };
    if args.max_order == 0 {
        return Err(Error::InvalidArgument(
            "subset order must be at least 1".into(),
        ));
    }
    let norms = parse_norm_list(&args.p)?;
    let d = f.d();
    let domain = f.domain().clone();
    let load = t0.elapsed();

    // Shared evaluation points for the empirical derivative norms that
    // feed the bound column.
    let t1 = Instant::now();
    let mut rng = rng_from_seed(derive_seed(args.seed, STREAM_DERIV_POINTS));
    let deriv_points: Vec<_> = (0..args.n_samples).map(|_| domain.sample(&mut rng)).collect();
    let grads = deriv_points
        .iter()
        .map(|x| f.grad(x))
        .collect::<Result<Vec<_>>>()?;
    let hessians = deriv_points
        .iter()
        .map(|x| f.hess(x))
        .collect::<Result<Vec<_>>>()?;

    let full: Vec<usize> = (0..d).collect();
    let domain_volume = domain.subset_volume(&full)?;
    let subsets = subsets_up_to(d, args.max_order);
    let quad = QuadratureSpec::monte_carlo(
        args.quad_samples,
        derive_seed(args.seed, STREAM_QUADRATURE),
    );

    let rows: Vec<TermNormRow> = subsets
        .par_iter()
        .enumerate()
        .map(|(k, u)| {
            let mut batch = Vec::with_capacity(norms.len());
            for (pi, &p) in norms.iter().enumerate() {
                let estimate = anova_term_norm(
                    &f,
                    u,
                    p,
                    args.n_samples,
                    &quad,
                    derive_seed(args.seed, (k * norms.len() + pi) as u64),
                )?;
                // Derivative-based bound, available for the orders covered
                // by sampled gradients/Hessians.
                let bound = if u.len() <= 2 {
                    let deriv_norm = match u.len() {
                        1 => p.combine(grads.iter().map(|g| g[u[0]])),
                        _ => p.combine(hessians.iter().map(|h| h[(u[0], u[1])])),
                    };
                    let vols = TermVolumes {
                        subset_v: domain.subset_volume(u)?,
                        domain: domain_volume,
                        subset_u: domain.subset_volume(u)?,
                    };
                    let kind = match p {
                        PNorm::Infinity => TermBoundKind::AnovaInf,
                        PNorm::One => TermBoundKind::AnovaOne,
                    };
                    Some(term_bound(u, u, deriv_norm, &vols, kind)?)
                } else {
                    None
                };
                batch.push(TermNormRow {
                    subset: u.clone(),
                    p: match p {
                        PNorm::Infinity => "inf".into(),
                        PNorm::One => "1".into(),
                    },
                    estimate,
                    bound,
                    n_samples: args.n_samples,
                    seed: args.seed,
                });
            }
            Ok(batch)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let estimate = t1.elapsed();

    let t2 = Instant::now();
    let mut csv = String::from(TERM_CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.to_csv_line());
        csv.push('\n');
    }
    write_text(&args.out, &csv)?;

    let mut manifest = RunManifest::new(command_line());
    manifest.config_hash = config_hash(&serde_json::json!({
        "builtin": args.builtin, "rotation_seed": args.rotation_seed, "noisy": args.noisy,
        "max_order": args.max_order, "p": args.p, "n_samples": args.n_samples,
        "quad_samples": args.quad_samples, "seed": args.seed,
    }))?;
    manifest.seed("master", args.seed);
    if let Some(path) = input_path {
        manifest.input(path);
    }
    manifest
        .output(&args.out)
        .timing("load", load)
        .timing("estimate", estimate)
        .timing("write", t2.elapsed());
    write_json(&manifest_path(&args.out), &manifest)
}

/// Accumulated outcomes of one (d, init, method, h, noisy, η) cell.
#[derive(Debug, Default)]
struct ReportCell {
    chis: Vec<i64>,
    loss_gaps: Vec<f64>,
}

pub const REPORT_CSV_HEADER: &str =
    "d,init,method,h,noisy,eta,n,chi0,chi1,chi2,chi_ge3,failure_ratio,mean_loss_gap";

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let t0 = Instant::now();
    let dim_filter = match &args.table {
        Some(name) => {
            let d: usize = name
                .strip_prefix("dim")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("bad table name {name:?} (expected dimN)"))
                })?;
            Some(d)
        }
        None => None,
    };

    let mut cells: std::collections::BTreeMap<(usize, String, String, String, bool, u64), ReportCell> =
        std::collections::BTreeMap::new();
    let mut skipped = 0usize;
    for path in &args.inputs {
        let report: SparsifyReport = read_json(path)?;
        let config: ResolvedRunConfig = serde_json::from_value(report.config.clone())
            .map_err(Error::json(&format!("configuration in {}", path.display())))?;
        if dim_filter.is_some_and(|d| d != report.d) {
            continue;
        }
        let Some(chi_by_eta) = &report.chi_by_eta else {
            skipped += 1;
            continue;
        };
        let h_label = config.h.map(|h| format!("{h}")).unwrap_or_default();
        for entry in chi_by_eta {
            let key = (
                report.d,
                config.init.clone(),
                config.method.clone(),
                h_label.clone(),
                config.noisy,
                entry.eta.to_bits(),
            );
            let cell = cells.entry(key).or_default();
            cell.chis.push(entry.chi);
            if let Some(gap) = report.loss_gap {
                cell.loss_gaps.push(gap);
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::EmptyInput(
            "no aggregatable reports (no χ tables matched the filter)".into(),
        ));
    }
    if skipped > 0 {
        eprintln!("note: skipped {skipped} report(s) without ground-truth χ tables");
    }

    let mut csv = String::from(REPORT_CSV_HEADER);
    csv.push('\n');
    for ((d, init, method, h, noisy, eta_bits), cell) in &cells {
        let eta = f64::from_bits(*eta_bits);
        let n = cell.chis.len();
        let count = |pred: &dyn Fn(i64) -> bool| cell.chis.iter().filter(|&&c| pred(c)).count();
        let ratio = crate::pipeline::failure_ratio(&cell.chis)?;
        let mean_gap = if cell.loss_gaps.is_empty() {
            String::new()
        } else {
            format!(
                "{:.17e}",
                cell.loss_gaps.iter().sum::<f64>() / cell.loss_gaps.len() as f64
            )
        };
        csv.push_str(&format!(
            "{d},{init},{method},{h},{noisy},{eta:e},{n},{},{},{},{},{:.17e},{mean_gap}\n",
            count(&|c| c == 0),
            count(&|c| c == 1),
            count(&|c| c == 2),
            count(&|c| c >= 3),
            ratio,
        ));
    }

    match &args.out {
        Some(path) => {
            write_text(path, &csv)?;
            let mut manifest = RunManifest::new(command_line());
            manifest.config_hash = config_hash(&serde_json::json!({
                "table": args.table,
                "inputs": args.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            }))?;
            for p in &args.inputs {
                manifest.input(p);
            }
            manifest.output(path).timing("aggregate", t0.elapsed());
            write_json(&manifest_path(path), &manifest)
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs > 0 {
        // Ignore failure: the global pool can only be set once per process.
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .ok();
    }
    match &cli.command {
        Command::Gen(GenCommand::Matrices(a)) => cmd_gen_matrices(a),
        Command::Gen(GenCommand::Function(a)) => cmd_gen_function(a),
        Command::Gen(GenCommand::Builtin(a)) => cmd_gen_builtin(a),
        Command::Sparsify(a) => cmd_sparsify(a),
        Command::Anova(a) => cmd_anova(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parse arguments, run, and translate the outcome into the documented
/// exit codes (0 success, 2 invalid input, 3 stage failure).
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e @ Error::Stage { .. }) => {
            eprintln!("error: {e}");
            3
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
