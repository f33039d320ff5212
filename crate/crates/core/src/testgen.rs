//! Synthetic instance generation: jointly sparsifiable matrix sets, random
//! sparse additive functions with analytic derivatives, a dense
//! Gaussian-mixture perturbation, and two fixed 7-dimensional benchmark
//! functions with known structure.
//!
//! Everything is deterministic given its seeds, so batch experiments are
//! replayable; specs serialize as structured data (factor descriptions,
//! edges, seeds), never as code.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decomposition::{Domain, GroundTruth, SampledFunction};
use crate::error::{Error, Result};
use crate::graphs::{connected_components, SparsityPattern};
use crate::linalg::haar_rotation;
use crate::types::{derive_seed, rng_from_seed, SymmetricMatrixSet};

/// Coefficient range for generated edge terms.
pub const COEFF_RANGE: (f64, f64) = (5.0, 20.0);

/// Largest dimension for the Gaussian-mixture perturbation (2^d mixture
/// terms per evaluation).
pub const MAX_NOISE_DIM: usize = 16;

/// One-dimensional factor g(x) with hand-coded first and second
/// derivatives; generated functions are sums of products of two factors.
/// The parameter t ranges over {1, 2, 3}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    /// x + t
    Affine { t: u8 },
    /// xᵗ (integer power, well-defined for negative x)
    Power { t: u8 },
    /// ∛(x² + t²) — the argument is strictly positive, so the real branch
    /// is smooth everywhere
    CubeRoot { t: u8 },
    /// sin(tx)
    Sin { t: u8 },
    /// cos(tx)
    Cos { t: u8 },
    /// e^{−(x−t)²}
    GaussBump { t: u8 },
}

impl Factor {
    /// All 18 factors (6 shapes × t ∈ {1,2,3}).
    pub fn all() -> Vec<Factor> {
        let mut out = Vec::with_capacity(18);
        for t in 1..=3u8 {
            out.push(Factor::Affine { t });
            out.push(Factor::Power { t });
            out.push(Factor::CubeRoot { t });
            out.push(Factor::Sin { t });
            out.push(Factor::Cos { t });
            out.push(Factor::GaussBump { t });
        }
        out
    }

    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Factor::Affine { t } => x + t as f64,
            Factor::Power { t } => x.powi(t as i32),
            Factor::CubeRoot { t } => (x * x + (t as f64) * (t as f64)).cbrt(),
            Factor::Sin { t } => (t as f64 * x).sin(),
            Factor::Cos { t } => (t as f64 * x).cos(),
            Factor::GaussBump { t } => (-(x - t as f64) * (x - t as f64)).exp(),
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match *self {
            Factor::Affine { .. } => 1.0,
            Factor::Power { t } => t as f64 * x.powi(t as i32 - 1),
            Factor::CubeRoot { t } => {
                let u = x * x + (t as f64) * (t as f64);
                2.0 * x / (3.0 * u.powf(2.0 / 3.0))
            }
            Factor::Sin { t } => t as f64 * (t as f64 * x).cos(),
            Factor::Cos { t } => -(t as f64) * (t as f64 * x).sin(),
            Factor::GaussBump { t } => {
                let s = x - t as f64;
                -2.0 * s * (-s * s).exp()
            }
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match *self {
            Factor::Affine { .. } => 0.0,
            Factor::Power { t: 1 } => 0.0, // avoid 0 · x⁻¹ = NaN at x = 0
            Factor::Power { t } => {
                let t = t as i32;
                (t * (t - 1)) as f64 * x.powi(t - 2)
            }
            Factor::CubeRoot { t } => {
                // g'' = (2/9)(3t² − x²) (x² + t²)^{−5/3}
                let t2 = (t as f64) * (t as f64);
                let u = x * x + t2;
                2.0 / 9.0 * (3.0 * t2 - x * x) / u.powf(5.0 / 3.0)
            }
            Factor::Sin { t } => {
                let t = t as f64;
                -t * t * (t * x).sin()
            }
            Factor::Cos { t } => {
                let t = t as f64;
                -t * t * (t * x).cos()
            }
            Factor::GaussBump { t } => {
                let s = x - t as f64;
                (4.0 * s * s - 2.0) * (-s * s).exp()
            }
        }
    }

    /// True when g'' is identically zero (the edge contributes no diagonal
    /// Hessian support at this endpoint).
    fn second_derivative_vanishes(&self) -> bool {
        matches!(
            *self,
            Factor::Affine { .. } | Factor::Power { t: 1 }
        )
    }

    fn random<R: Rng + ?Sized>(rng: &mut R) -> Factor {
        *Factor::all().choose(rng).expect("factor list is nonempty")
    }
}

/// One additive term c · g₁(x_j) g₂(x_k) on an edge (j, k), j < k.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeTerm {
    pub j: usize,
    pub k: usize,
    pub coeff: f64,
    pub g1: Factor,
    pub g2: Factor,
}

/// Structured description of a generated sparse additive function; the
/// realized closures are reconstructed from this data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub d: usize,
    /// Partition of the coordinates into the intended connected components.
    pub components: Vec<Vec<usize>>,
    pub terms: Vec<EdgeTerm>,
    /// Seed of the hidden Haar rotation; `None` keeps the sparse
    /// coordinates.
    pub rotation_seed: Option<u64>,
    /// Add the Gaussian-mixture perturbation on top.
    pub with_noise: bool,
    /// Whether d lies in the reference protocol range [10, 15].
    pub protocol: bool,
}

impl FunctionSpec {
    /// Draw a random spec: the coordinates are partitioned into components
    /// of 2–4 vertices, each component gets a random spanning tree plus a
    /// uniform number of extra edges (up to complete), and every edge gets
    /// a coefficient in [5, 20] and two random factors.
    ///
    /// Edge distribution inside a component and coefficient sign are
    /// under-determined by the reference protocol; this implementation uses
    /// uniform extra-edge counts and positive coefficients.
    pub fn random(d: usize, seed: u64) -> Result<FunctionSpec> {
        if d < 2 {
            return Err(Error::InvalidArgument(format!(
                "generated functions need d >= 2, got {d}"
            )));
        }
        let mut rng = rng_from_seed(seed);

        // Partition sizes in {2,3,4} that exactly cover d: pick a feasible
        // size uniformly, where feasible means the remainder is 0 or >= 2.
        let mut sizes = Vec::new();
        let mut left = d;
        while left > 0 {
            let feasible: Vec<usize> = [2usize, 3, 4]
                .into_iter()
                .filter(|&s| s <= left && (left - s == 0 || left - s >= 2))
                .collect();
            let s = *feasible
                .choose(&mut rng)
                .expect("d >= 2 always admits a {2,3,4} partition");
            sizes.push(s);
            left -= s;
        }
        let mut vertices: Vec<usize> = (0..d).collect();
        vertices.shuffle(&mut rng);
        let mut components = Vec::with_capacity(sizes.len());
        let mut cursor = 0;
        for s in sizes {
            let mut comp = vertices[cursor..cursor + s].to_vec();
            comp.sort_unstable();
            components.push(comp);
            cursor += s;
        }
        components.sort_by_key(|c| (std::cmp::Reverse(c.len()), c[0]));

        let mut terms = Vec::new();
        for comp in &components {
            let s = comp.len();
            // Random spanning tree: attach each vertex (in random order) to
            // a uniformly chosen earlier one.
            let mut order = comp.clone();
            order.shuffle(&mut rng);
            let mut edges: Vec<(usize, usize)> = Vec::new();
            for i in 1..s {
                let parent = order[rng.gen_range(0..i)];
                let (a, b) = (order[i].min(parent), order[i].max(parent));
                edges.push((a, b));
            }
            // Extra edges: total count uniform in [s−1, s(s−1)/2].
            let complete = s * (s - 1) / 2;
            let target = rng.gen_range(s - 1..=complete);
            let mut candidates: Vec<(usize, usize)> = Vec::new();
            for ai in 0..s {
                for bi in ai + 1..s {
                    let e = (comp[ai], comp[bi]);
                    if !edges.contains(&e) {
                        candidates.push(e);
                    }
                }
            }
            candidates.shuffle(&mut rng);
            edges.extend(candidates.into_iter().take(target - (s - 1)));
            edges.sort_unstable();
            for (j, k) in edges {
                terms.push(EdgeTerm {
                    j,
                    k,
                    coeff: rng.gen_range(COEFF_RANGE.0..COEFF_RANGE.1),
                    g1: Factor::random(&mut rng),
                    g2: Factor::random(&mut rng),
                });
            }
        }

        Ok(FunctionSpec {
            d,
            components,
            terms,
            rotation_seed: None,
            with_noise: false,
            protocol: (10..=15).contains(&d),
        })
    }

    pub fn with_rotation_seed(mut self, seed: u64) -> Self {
        self.rotation_seed = Some(seed);
        self
    }

    pub fn with_noise(mut self, on: bool) -> Self {
        self.with_noise = on;
        self
    }

    /// Joint Hessian support of the sparse representative: every edge is an
    /// off-diagonal entry; a diagonal entry (j,j) appears when some
    /// incident factor has a non-vanishing second derivative.
    pub fn pattern(&self) -> Result<SparsityPattern> {
        let mut diag = std::collections::BTreeSet::new();
        for t in &self.terms {
            if !t.g1.second_derivative_vanishes() {
                diag.insert(t.j);
            }
            if !t.g2.second_derivative_vanishes() {
                diag.insert(t.k);
            }
        }
        SparsityPattern::new(self.d, self.terms.iter().map(|t| (t.j, t.k)), diag)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.d];
        for comp in &self.components {
            for &v in comp {
                if v >= self.d {
                    return Err(Error::InvalidArgument(format!(
                        "component vertex {v} out of range for d={}",
                        self.d
                    )));
                }
                if seen[v] {
                    return Err(Error::InvalidArgument(format!(
                        "vertex {v} appears in two components"
                    )));
                }
                seen[v] = true;
            }
        }
        for t in &self.terms {
            if t.j >= t.k || t.k >= self.d {
                return Err(Error::InvalidArgument(format!(
                    "edge ({}, {}) is not a valid ordered pair below d={}",
                    t.j, t.k, self.d
                )));
            }
            if !self
                .components
                .iter()
                .any(|c| c.contains(&t.j) && c.contains(&t.k))
            {
                return Err(Error::InvalidArgument(format!(
                    "edge ({}, {}) crosses component boundaries",
                    t.j, t.k
                )));
            }
        }
        Ok(())
    }

    /// Build the callable function on [0,1]^d with analytic gradient and
    /// Hessian, the hidden rotation applied and the perturbation added as
    /// requested, carrying the sparse representative's structure as ground
    /// truth.
    pub fn realize(&self) -> Result<SampledFunction> {
        self.validate()?;
        let d = self.d;
        let domain = Domain::unit_box(d)?;
        let terms = self.terms.clone();
        let terms_g = terms.clone();
        let terms_h = terms.clone();
        let f = SampledFunction::new(domain, move |x: &DVector<f64>| {
            terms
                .iter()
                .map(|t| t.coeff * t.g1.value(x[t.j]) * t.g2.value(x[t.k]))
                .sum()
        })
        .with_grad(move |x: &DVector<f64>| {
            let mut g = DVector::zeros(x.len());
            for t in &terms_g {
                g[t.j] += t.coeff * t.g1.d1(x[t.j]) * t.g2.value(x[t.k]);
                g[t.k] += t.coeff * t.g1.value(x[t.j]) * t.g2.d1(x[t.k]);
            }
            g
        })
        .with_hess(move |x: &DVector<f64>| {
            let mut h = DMatrix::zeros(x.len(), x.len());
            for t in &terms_h {
                h[(t.j, t.j)] += t.coeff * t.g1.d2(x[t.j]) * t.g2.value(x[t.k]);
                h[(t.k, t.k)] += t.coeff * t.g1.value(x[t.j]) * t.g2.d2(x[t.k]);
                let cross = t.coeff * t.g1.d1(x[t.j]) * t.g2.d1(x[t.k]);
                h[(t.j, t.k)] += cross;
                h[(t.k, t.j)] += cross;
            }
            h
        });

        let pattern = self.pattern()?;
        let components = connected_components(&pattern);
        let (f, rotation) = match self.rotation_seed {
            Some(seed) => {
                let r = haar_rotation(d, &mut rng_from_seed(seed));
                (f.rotated(&r)?, Some(r))
            }
            None => (f, None),
        };
        let f = if self.with_noise {
            f.add(&noise_function(d)?)?
        } else {
            f
        };
        Ok(f.with_ground_truth(GroundTruth {
            rotation,
            pattern,
            components,
        }))
    }
}

/// Draw and realize a random sparse additive test function in one step.
pub fn gen_test_function(d: usize, seed: u64, rotate: bool, with_noise: bool) -> Result<SampledFunction> {
    let mut spec = FunctionSpec::random(d, seed)?;
    if rotate {
        spec = spec.with_rotation_seed(derive_seed(seed, 0x0707));
    }
    spec = spec.with_noise(with_noise);
    spec.realize()
}

/// Dense smooth perturbation: an isotropic Gaussian mixture with one bump
/// at every corner of {−1/2, 3/2}^d, N(x) = (1/2000) Σ_μ e^{−‖x−μ‖²}
/// (covariance I/2 makes the exponent −‖x−μ‖²). Symmetric about the unit
/// box center (1/2, …, 1/2), where its gradient vanishes. Costs 2^d terms
/// per evaluation, so d is capped at 16.
pub fn noise_function(d: usize) -> Result<SampledFunction> {
    if d == 0 {
        return Err(Error::EmptyInput("perturbation in dimension 0".into()));
    }
    if d > MAX_NOISE_DIM {
        return Err(Error::TooLarge {
            context: "perturbation dimension (2^d mixture terms)".into(),
            got: d,
            limit: MAX_NOISE_DIM,
        });
    }
    let centers: Vec<DVector<f64>> = (0..(1usize << d))
        .map(|mask| {
            DVector::from_fn(d, |i, _| if mask & (1 << i) != 0 { 1.5 } else { -0.5 })
        })
        .collect();
    let scale = 1.0 / 2000.0;
    let cv = centers.clone();
    let cg = centers.clone();
    let ch = centers;
    Ok(SampledFunction::new(Domain::unit_box(d)?, move |x| {
        scale
            * cv.iter()
                .map(|mu| (-(x - mu).norm_squared()).exp())
                .sum::<f64>()
    })
    .with_grad(move |x| {
        let mut g = DVector::zeros(x.len());
        for mu in &cg {
            let diff = x - mu;
            g.axpy(-2.0 * scale * (-diff.norm_squared()).exp(), &diff, 1.0);
        }
        g
    })
    .with_hess(move |x| {
        let d = x.len();
        let mut h = DMatrix::zeros(d, d);
        for mu in &ch {
            let diff = x - mu;
            let w = scale * (-diff.norm_squared()).exp();
            for i in 0..d {
                for j in 0..d {
                    h[(i, j)] += w * 4.0 * diff[i] * diff[j];
                }
                h[(i, i)] -= 2.0 * w;
            }
        }
        h
    }))
}

/// Specification of a hidden-rotation matrix-set instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixInstanceSpec {
    pub d: usize,
    /// Joint support of the sparse representatives.
    pub pattern: SparsityPattern,
    /// Number of matrices in the set.
    pub n_matrices: usize,
    pub rotation_seed: u64,
    pub entry_seed: u64,
    /// Entrywise Gaussian noise level (0 for clean instances).
    pub sigma: f64,
}

impl MatrixInstanceSpec {
    pub fn new(
        d: usize,
        pattern: SparsityPattern,
        n_matrices: usize,
        rotation_seed: u64,
        entry_seed: u64,
        sigma: f64,
    ) -> Result<Self> {
        if pattern.d() != d {
            return Err(Error::DimensionMismatch {
                context: "pattern for matrix instance".into(),
                expected: d,
                got: pattern.d(),
            });
        }
        if n_matrices == 0 {
            return Err(Error::EmptyInput("instance with 0 matrices".into()));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise level must be a nonnegative finite number, got {sigma}"
            )));
        }
        Ok(Self {
            d,
            pattern,
            n_matrices,
            rotation_seed,
            entry_seed,
            sigma,
        })
    }
}

/// Known structure behind a generated matrix set.
#[derive(Debug, Clone)]
pub struct MatrixGroundTruth {
    pub rotation: DMatrix<f64>,
    pub pattern: SparsityPattern,
}

/// Largest joint-support size |J| (distinct unordered entries, diagonal
/// slots included) used by the reference protocol per dimension (None
/// outside the tabulated range 2–5).
///
/// For d ∈ {2, 3} the cap equals the full slot count d(d+1)/2, so those
/// dimensions can draw a dense support.
pub fn protocol_support_cap(d: usize) -> Option<usize> {
    match d {
        2 => Some(3),
        3 => Some(6),
        4 => Some(7),
        5 => Some(11),
        _ => None,
    }
}

/// Draw a random joint support of exactly `size` distinct unordered
/// entries (i ≤ j; diagonal slots count), chosen uniformly among all
/// d(d+1)/2 slots.
pub fn random_pattern_sized(d: usize, size: usize, seed: u64) -> Result<SparsityPattern> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "random supports need d >= 2, got {d}"
        )));
    }
    let total = d * (d + 1) / 2;
    if size == 0 || size > total {
        return Err(Error::InvalidArgument(format!(
            "support size must lie in 1..={total} for d = {d}, got {size}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut all: Vec<(usize, usize)> = Vec::with_capacity(total);
    for i in 0..d {
        for j in i..d {
            all.push((i, j));
        }
    }
    all.shuffle(&mut rng);
    let mut edges = Vec::new();
    let mut diag = Vec::new();
    for (i, j) in all.into_iter().take(size) {
        if i == j {
            diag.push(i);
        } else {
            edges.push((i, j));
        }
    }
    SparsityPattern::new(d, edges, diag)
}

/// Draw a random support with |J| uniform in [1, cap], where cap is the
/// protocol bound for d ∈ 2..=5 and the full slot count d(d+1)/2 otherwise.
pub fn random_pattern(d: usize, seed: u64) -> Result<SparsityPattern> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "random supports need d >= 2, got {d}"
        )));
    }
    let total = d * (d + 1) / 2;
    let cap = protocol_support_cap(d).unwrap_or(total).min(total);
    let mut rng = rng_from_seed(seed);
    let size = rng.gen_range(1..=cap);
    random_pattern_sized(d, size, derive_seed(seed, 0x5172))
}

/// Generate the matrix set: sparse representatives with Unif[−1,1] entries
/// exactly on the pattern, conjugated by a hidden Haar rotation
/// (H_n = Rᵀ H̃_n R), plus entrywise N(0, σ²) noise (symmetrized) when
/// σ > 0.
pub fn gen_matrix_set(spec: &MatrixInstanceSpec) -> Result<(SymmetricMatrixSet, MatrixGroundTruth)> {
    use rand_distr::{Distribution, Normal};
    let d = spec.d;
    if spec.pattern.d() != d {
        return Err(Error::DimensionMismatch {
            context: "pattern for matrix generation".into(),
            expected: d,
            got: spec.pattern.d(),
        });
    }
    if spec.n_matrices == 0 {
        return Err(Error::EmptyInput("matrix set with 0 matrices".into()));
    }
    let r = haar_rotation(d, &mut rng_from_seed(spec.rotation_seed));
    let mut rng = rng_from_seed(spec.entry_seed);
    // Noise comes from its own stream so σ > 0 perturbs the same base
    // instance that σ = 0 produces (noisy runs have a clean counterpart).
    let mut noise_rng = rng_from_seed(derive_seed(spec.entry_seed, 0x0e01));
    let normal = if spec.sigma > 0.0 {
        Some(Normal::new(0.0, spec.sigma).map_err(|e| {
            Error::InvalidArgument(format!("invalid noise level {}: {e}", spec.sigma))
        })?)
    } else {
        None
    };
    let mut mats = Vec::with_capacity(spec.n_matrices);
    for _ in 0..spec.n_matrices {
        let mut sparse = DMatrix::zeros(d, d);
        for &(i, j) in spec.pattern.off_diag() {
            let v = rng.gen_range(-1.0..1.0);
            sparse[(i, j)] = v;
            sparse[(j, i)] = v;
        }
        for &i in spec.pattern.diag() {
            sparse[(i, i)] = rng.gen_range(-1.0..1.0);
        }
        let mut h = r.transpose() * sparse * &r;
        // Exact symmetry (the conjugation is symmetric only up to round-off).
        h = (&h + h.transpose()) * 0.5;
        if let Some(n) = &normal {
            for i in 0..d {
                for j in i..d {
                    let z = n.sample(&mut noise_rng);
                    h[(i, j)] += z;
                    if j > i {
                        h[(j, i)] += z;
                    }
                }
            }
        }
        mats.push(h);
    }
    Ok((
        SymmetricMatrixSet::new(mats)?,
        MatrixGroundTruth {
            rotation: r,
            pattern: spec.pattern.clone(),
        },
    ))
}

/// Identifier of a built-in 7-dimensional benchmark function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchmarkId {
    One,
    Two,
}

impl BenchmarkId {
    pub fn name(&self) -> &'static str {
        match self {
            BenchmarkId::One => "bench1",
            BenchmarkId::Two => "bench2",
        }
    }
}

impl std::str::FromStr for BenchmarkId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bench1" | "1" | "one" => Ok(BenchmarkId::One),
            "bench2" | "2" | "two" => Ok(BenchmarkId::Two),
            other => Err(Error::InvalidArgument(format!(
                "unknown benchmark '{other}' (use bench1 or bench2)"
            ))),
        }
    }
}

/// The two fixed 7-dimensional sparse additive benchmarks on [−1,1]^7 with
/// exact derivatives and recorded structure (0-based indices):
///
/// * `One`:  5 e^{−(x₀−1)²}(x₃+1) + 7 sin(2x₀) x₆³ + 10 cos(2x₁)(x₄+3);
///   couplings {(0,3), (0,6), (1,4)}, coordinates 2 and 5 unused.
/// * `Two`:  5 e^{−(x₀−1)²} cos(3x₃) + 10 x₀ x₆³ + 8 sin(x₁) cos(x₆)
///   + 12 cos(2x₂) sin(3x₄) + 6 x₄ x₅; couplings
///   {(0,3), (0,6), (1,6), (2,4), (4,5)}, every coordinate active.
pub fn builtin_benchmark(id: BenchmarkId) -> SampledFunction {
    let domain = Domain::symmetric_box(7, 1.0).expect("static domain");
    match id {
        BenchmarkId::One => {
            SampledFunction::new(domain, |x: &DVector<f64>| {
                let b = (-(x[0] - 1.0) * (x[0] - 1.0)).exp();
                5.0 * b * (x[3] + 1.0)
                    + 7.0 * (2.0 * x[0]).sin() * x[6].powi(3)
                    + 10.0 * (2.0 * x[1]).cos() * (x[4] + 3.0)
            })
            .with_grad(|x: &DVector<f64>| {
                let b = (-(x[0] - 1.0) * (x[0] - 1.0)).exp();
                let db = -2.0 * (x[0] - 1.0) * b;
                let mut g = DVector::zeros(7);
                g[0] = 5.0 * db * (x[3] + 1.0) + 14.0 * (2.0 * x[0]).cos() * x[6].powi(3);
                g[1] = -20.0 * (2.0 * x[1]).sin() * (x[4] + 3.0);
                g[3] = 5.0 * b;
                g[4] = 10.0 * (2.0 * x[1]).cos();
                g[6] = 21.0 * (2.0 * x[0]).sin() * x[6] * x[6];
                g
            })
            .with_hess(|x: &DVector<f64>| {
                let b = (-(x[0] - 1.0) * (x[0] - 1.0)).exp();
                let db = -2.0 * (x[0] - 1.0) * b;
                let d2b = (4.0 * (x[0] - 1.0) * (x[0] - 1.0) - 2.0) * b;
                let mut h = DMatrix::zeros(7, 7);
                h[(0, 0)] =
                    5.0 * d2b * (x[3] + 1.0) - 28.0 * (2.0 * x[0]).sin() * x[6].powi(3);
                h[(1, 1)] = -40.0 * (2.0 * x[1]).cos() * (x[4] + 3.0);
                h[(6, 6)] = 42.0 * (2.0 * x[0]).sin() * x[6];
                h[(0, 3)] = 5.0 * db;
                h[(0, 6)] = 42.0 * (2.0 * x[0]).cos() * x[6] * x[6];
                h[(1, 4)] = -20.0 * (2.0 * x[1]).sin();
                h[(3, 0)] = h[(0, 3)];
                h[(6, 0)] = h[(0, 6)];
                h[(4, 1)] = h[(1, 4)];
                h
            })
            .with_ground_truth(benchmark_truth(id))
        }
        BenchmarkId::Two => {
            SampledFunction::new(domain, |x: &DVector<f64>| {
                let b = (-(x[0] - 1.0) * (x[0] - 1.0)).exp();
                5.0 * b * (3.0 * x[3]).cos()
                    + 10.0 * x[0] * x[6].powi(3)
                    + 8.0 * x[1].sin() * x[6].cos()
                    + 12.0 * (2.0 * x[2]).cos() * (3.0 * x[4]).sin()
                    + 6.0 * x[4] * x[5]
            })
            .with_grad(|x: &DVector<f64>| {
                let b = (-(x[0] - 1.0) * (x[0] - 1.0)).exp();
                let db = -2.0 * (x[0] - 1.0) * b;
                let mut g = DVector::zeros(7);
                g[0] = 5.0 * db * (3.0 * x[3]).cos() + 10.0 * x[6].powi(3);
                g[1] = 8.0 * x[1].cos() * x[6].cos();
                g[2] = -24.0 * (2.0 * x[2]).sin() * (3.0 * x[4]).sin();
                g[3] = -15.0 * b * (3.0 * x[3]).sin();
                g[4] = 36.0 * (2.0 * x[2]).cos() * (3.0 * x[4]).cos() + 6.0 * x[5];
                g[5] = 6.0 * x[4];
                g[6] = 30.0 * x[0] * x[6] * x[6] - 8.0 * x[1].sin() * x[6].sin();
                g
            })
            .with_hess(|x: &DVector<f64>| {
                let b = (-(x[0] - 1.0) * (x[0] - 1.0)).exp();
                let db = -2.0 * (x[0] - 1.0) * b;
                let d2b = (4.0 * (x[0] - 1.0) * (x[0] - 1.0) - 2.0) * b;
                let mut h = DMatrix::zeros(7, 7);
                h[(0, 0)] = 5.0 * d2b * (3.0 * x[3]).cos();
                h[(1, 1)] = -8.0 * x[1].sin() * x[6].cos();
                h[(2, 2)] = -48.0 * (2.0 * x[2]).cos() * (3.0 * x[4]).sin();
                h[(3, 3)] = -45.0 * b * (3.0 * x[3]).cos();
                h[(4, 4)] = -108.0 * (2.0 * x[2]).cos() * (3.0 * x[4]).sin();
                h[(6, 6)] = 60.0 * x[0] * x[6] - 8.0 * x[1].sin() * x[6].cos();
                h[(0, 3)] = -15.0 * db * (3.0 * x[3]).sin();
                h[(0, 6)] = 30.0 * x[6] * x[6];
                h[(1, 6)] = -8.0 * x[1].cos() * x[6].sin();
                h[(2, 4)] = -72.0 * (2.0 * x[2]).sin() * (3.0 * x[4]).cos();
                h[(4, 5)] = 6.0;
                h[(3, 0)] = h[(0, 3)];
                h[(6, 0)] = h[(0, 6)];
                h[(6, 1)] = h[(1, 6)];
                h[(4, 2)] = h[(2, 4)];
                h[(5, 4)] = h[(4, 5)];
                h
            })
            .with_ground_truth(benchmark_truth(id))
        }
    }
}

fn benchmark_truth(id: BenchmarkId) -> GroundTruth {
    let (off, diag): (Vec<(usize, usize)>, Vec<usize>) = match id {
        // (x₃+1) and (x₄+3) are affine, so 3 and 4 carry no diagonal
        // support; 2 and 5 are entirely unused.
        BenchmarkId::One => (vec![(0, 3), (0, 6), (1, 4)], vec![0, 1, 6]),
        // x₅ enters only linearly through 6 x₄x₅.
        BenchmarkId::Two => (
            vec![(0, 3), (0, 6), (1, 6), (2, 4), (4, 5)],
            vec![0, 1, 2, 3, 4, 6],
        ),
    };
    let pattern = SparsityPattern::new(7, off, diag).expect("static pattern");
    let components = connected_components(&pattern);
    GroundTruth {
        rotation: None,
        pattern,
        components,
    }
}

/// Benchmark composed with a seeded hidden Haar rotation; the ground truth
/// keeps the sparse representative's structure and records the rotation.
pub fn builtin_benchmark_rotated(id: BenchmarkId, rotation_seed: u64) -> Result<SampledFunction> {
    let f = builtin_benchmark(id);
    let truth = f.ground_truth().expect("benchmarks carry truth").clone();
    let r = haar_rotation(7, &mut rng_from_seed(rotation_seed));
    Ok(f.rotated(&r)?.with_ground_truth(GroundTruth {
        rotation: Some(r),
        ..truth
    }))
}

/// Rotated benchmark plus the Gaussian-mixture perturbation.
pub fn builtin_benchmark_noisy(id: BenchmarkId, rotation_seed: u64) -> Result<SampledFunction> {
    let f = builtin_benchmark_rotated(id, rotation_seed)?;
    let truth = f.ground_truth().expect("benchmarks carry truth").clone();
    Ok(f.add(&noise_function(7)?)?.with_ground_truth(truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::{derivative_smallness_counts, PNorm};
    use crate::graphs::pattern_from_matrix_set;
    use crate::linalg::span_dimension;
    use approx::assert_relative_eq;

    #[test]
    fn factor_derivatives_match_finite_differences() {
        let h = 1e-5;
        for f in Factor::all() {
            for &x in &[-1.3, -0.4, 0.0, 0.7, 2.1] {
                let fd1 = (f.value(x + h) - f.value(x - h)) / (2.0 * h);
                let fd2 = (f.d1(x + h) - f.d1(x - h)) / (2.0 * h);
                assert!(
                    (fd1 - f.d1(x)).abs() <= 1e-6 * f.d1(x).abs().max(1.0),
                    "{f:?} d1 at {x}: fd {fd1} vs {}",
                    f.d1(x)
                );
                assert!(
                    (fd2 - f.d2(x)).abs() <= 1e-6 * f.d2(x).abs().max(1.0),
                    "{f:?} d2 at {x}: fd {fd2} vs {}",
                    f.d2(x)
                );
            }
        }
    }

    #[test]
    fn matrix_set_support_is_exactly_the_pattern() {
        let pattern = SparsityPattern::new(4, [(0, 1), (2, 3)], 0..4).unwrap();
        let spec = MatrixInstanceSpec::new(4, pattern.clone(), 6, 11, 12, 0.0).unwrap();
        let (set, truth) = gen_matrix_set(&spec).unwrap();
        assert_eq!(set.len(), 6);
        assert_eq!(set.dim(), 4);
        // Matrices are symmetric to the bit.
        for m in set.iter() {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(m[(i, j)], m[(j, i)]);
                }
            }
        }
        // Undoing the hidden rotation recovers the sparse support exactly.
        let undone = set.conjugated(&truth.rotation.transpose()).unwrap();
        let recovered = pattern_from_matrix_set(&undone, 1e-12).unwrap();
        assert_eq!(recovered, pattern);
    }

    #[test]
    fn matrix_set_span_has_generic_dimension() {
        // dim span = |J| + |diag| for generic entries.
        let pattern = SparsityPattern::new(4, [(0, 1), (0, 2), (2, 3), (1, 3), (0, 3)], 0..4)
            .unwrap();
        let spec = MatrixInstanceSpec::new(4, pattern, 14, 3, 4, 0.0).unwrap();
        let (set, _) = gen_matrix_set(&spec).unwrap();
        assert_eq!(span_dimension(&set, 1e-10), 5 + 4);
    }

    #[test]
    fn matrix_generation_is_reproducible_and_noise_perturbs() {
        let pattern = random_pattern(4, 9).unwrap();
        let spec = MatrixInstanceSpec::new(4, pattern.clone(), 5, 1, 2, 0.0).unwrap();
        let (a, _) = gen_matrix_set(&spec).unwrap();
        let (b, _) = gen_matrix_set(&spec).unwrap();
        for (ma, mb) in a.iter().zip(b.iter()) {
            assert_eq!(ma, mb);
        }
        let noisy_spec = MatrixInstanceSpec::new(4, pattern, 5, 1, 2, 1e-3).unwrap();
        let (c, _) = gen_matrix_set(&noisy_spec).unwrap();
        let max_dev = a
            .iter()
            .zip(c.iter())
            .map(|(ma, mc)| (ma - mc).amax())
            .fold(0.0f64, f64::max);
        assert!(max_dev > 1e-5 && max_dev < 1e-2, "deviation {max_dev}");
    }

    #[test]
    fn random_patterns_respect_protocol_bounds() {
        for d in 2..=5 {
            let cap = protocol_support_cap(d).unwrap();
            assert!(cap <= d * (d + 1) / 2);
            for seed in 0..30 {
                let p = random_pattern(d, seed).unwrap();
                let size = p.off_diag().len() + p.diag().len();
                assert!((1..=cap).contains(&size), "d={d} |J|={size}");
            }
        }
        // The sized variant honors an exact request and rejects bad sizes.
        let p = random_pattern_sized(4, 7, 3).unwrap();
        assert_eq!(p.off_diag().len() + p.diag().len(), 7);
        assert!(random_pattern_sized(4, 0, 0).is_err());
        assert!(random_pattern_sized(4, 11, 0).is_err());
        assert!(random_pattern(1, 0).is_err());
    }

    #[test]
    fn generated_function_matches_its_spec() {
        let spec = FunctionSpec::random(10, 42).unwrap();
        assert!(spec.protocol);
        // Components partition the coordinates with sizes 2–4.
        let mut seen = vec![false; 10];
        for comp in &spec.components {
            assert!((2..=4).contains(&comp.len()));
            for &v in comp {
                assert!(!seen[v]);
                seen[v] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        // Edges stay inside components with protocol coefficients.
        for t in &spec.terms {
            assert!(t.coeff >= COEFF_RANGE.0 && t.coeff < COEFF_RANGE.1);
            assert!(spec
                .components
                .iter()
                .any(|c| c.contains(&t.j) && c.contains(&t.k)));
        }
        // Edge count per component between a tree and the complete graph.
        for comp in &spec.components {
            let s = comp.len();
            let count = spec
                .terms
                .iter()
                .filter(|t| comp.contains(&t.j))
                .count();
            assert!(count >= s - 1 && count <= s * (s - 1) / 2);
        }
        assert!(!FunctionSpec::random(5, 0).unwrap().protocol);
        assert_eq!(FunctionSpec::random(10, 42).unwrap(), spec);
    }

    #[test]
    fn realized_functions_pass_the_derivative_gate() {
        for seed in [0u64, 1, 2] {
            let f = gen_test_function(10, seed, false, false).unwrap();
            let check = f.validate_derivatives(20, seed).unwrap();
            assert!(check.max_grad_error < 1e-4, "grad {}", check.max_grad_error);
            assert!(check.max_hess_error < 1e-4, "hess {}", check.max_hess_error);
        }
        // Rotated and perturbed variants pass the same gate.
        let f = gen_test_function(11, 7, true, true).unwrap();
        let check = f.validate_derivatives(10, 3).unwrap();
        assert!(check.max_grad_error < 1e-4);
        assert!(check.max_hess_error < 1e-4);
    }

    #[test]
    fn ground_truth_components_match_the_analytic_pattern() {
        for seed in 0..5 {
            let spec = FunctionSpec::random(12, seed).unwrap();
            let f = spec.realize().unwrap();
            let truth = f.ground_truth().unwrap();
            let expected = connected_components(&truth.pattern);
            assert_eq!(truth.components, expected);
            // The intended partition matches the realized components: each
            // spec component is connected (spanning tree), so profiles agree.
            let mut intended: Vec<usize> =
                spec.components.iter().map(|c| c.len()).collect();
            intended.sort_unstable_by(|a, b| b.cmp(a));
            assert_eq!(truth.components.profile(), intended);
        }
    }

    #[test]
    fn single_edge_function_has_the_product_rule_support() {
        let spec = FunctionSpec {
            d: 2,
            components: vec![vec![0, 1]],
            terms: vec![EdgeTerm {
                j: 0,
                k: 1,
                coeff: 1.0,
                g1: Factor::Sin { t: 1 },
                g2: Factor::Sin { t: 1 },
            }],
            rotation_seed: None,
            with_noise: false,
            protocol: false,
        };
        let f = spec.realize().unwrap();
        let x = DVector::from_vec(vec![0.3, 0.8]);
        assert_relative_eq!(f.eval(&x), x[0].sin() * x[1].sin(), epsilon = 1e-15);
        let truth = f.ground_truth().unwrap();
        assert_eq!(
            truth.pattern,
            SparsityPattern::new(2, [(0, 1)], [0, 1]).unwrap()
        );
        let h = f.hess(&x).unwrap();
        assert_relative_eq!(h[(0, 1)], x[0].cos() * x[1].cos(), epsilon = 1e-14);
        assert_relative_eq!(h[(0, 0)], -x[0].sin() * x[1].sin(), epsilon = 1e-14);
    }

    #[test]
    fn rotation_hides_the_support_without_changing_values() {
        let spec = FunctionSpec::random(10, 3).unwrap();
        let plain = spec.realize().unwrap();
        let rotated = spec.clone().with_rotation_seed(99).realize().unwrap();
        let r = rotated.ground_truth().unwrap().rotation.clone().unwrap();
        assert!((r.transpose() * &r - DMatrix::identity(10, 10)).amax() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-10);
        let mut rng = rng_from_seed(1);
        let x = rotated.domain().sample(&mut rng);
        assert_relative_eq!(rotated.eval(&x), plain.eval(&(&r * &x)), epsilon = 1e-12);
        // The rotated Hessian is generically dense; the plain one is not.
        let hr = rotated.hess(&x).unwrap();
        let dense = (0..10)
            .flat_map(|i| (0..10).map(move |j| (i, j)))
            .filter(|&(i, j)| i < j)
            .all(|(i, j)| hr[(i, j)].abs() > 1e-10);
        assert!(dense);
    }

    #[test]
    fn perturbation_has_the_documented_closed_form() {
        // d=1 at x=−1/2: the two bumps sit at distance 0 and 2, so the
        // value is (1 + e^{−4})/2000.
        let n1 = noise_function(1).unwrap();
        let v = n1.eval(&DVector::from_vec(vec![-0.5]));
        assert_relative_eq!(v, (1.0 + (-4.0f64).exp()) / 2000.0, epsilon = 1e-15);
        // Value at any mixture center is at least 1/2000.
        let n3 = noise_function(3).unwrap();
        let mu = DVector::from_vec(vec![-0.5, 1.5, -0.5]);
        assert!(n3.eval(&mu) >= 1.0 / 2000.0);
        // Gradient vanishes at the symmetry center.
        for d in [2usize, 3, 5] {
            let n = noise_function(d).unwrap();
            let center = DVector::from_element(d, 0.5);
            assert!(n.grad(&center).unwrap().amax() < 1e-18);
        }
        // Analytic derivatives pass the finite-difference gate.
        let check = n3.validate_derivatives(10, 4).unwrap();
        assert!(check.max_grad_error < 1e-6);
        assert!(check.max_hess_error < 1e-6);
        assert!(matches!(
            noise_function(17),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn benchmarks_have_the_recorded_structure() {
        let f1 = builtin_benchmark(BenchmarkId::One);
        let f2 = builtin_benchmark(BenchmarkId::Two);
        for f in [&f1, &f2] {
            let check = f.validate_derivatives(30, 5).unwrap();
            assert!(check.max_grad_error < 1e-6, "grad {}", check.max_grad_error);
            assert!(check.max_hess_error < 1e-6, "hess {}", check.max_hess_error);
        }
        let mut rng = rng_from_seed(8);
        let points: Vec<DVector<f64>> =
            (0..200).map(|_| f1.domain().sample(&mut rng)).collect();
        for p in [PNorm::One, PNorm::Infinity] {
            let (g1, h1) = derivative_smallness_counts(&f1, &points, p, 1e-4).unwrap();
            assert_eq!((g1, h1), (2, 18), "bench1 under {p:?}");
            let (g2, h2) = derivative_smallness_counts(&f2, &points, p, 1e-4).unwrap();
            assert_eq!((g2, h2), (0, 16), "bench2 under {p:?}");
        }
        // Recorded supports match the smallness counts.
        let t1 = f1.ground_truth().unwrap();
        assert_eq!(
            t1.pattern.off_diag().iter().copied().collect::<Vec<_>>(),
            vec![(0, 3), (0, 6), (1, 4)]
        );
        assert_eq!(t1.components.profile(), vec![3, 2, 1, 1]);
        let t2 = f2.ground_truth().unwrap();
        assert_eq!(
            t2.pattern.off_diag().iter().copied().collect::<Vec<_>>(),
            vec![(0, 3), (0, 6), (1, 6), (2, 4), (4, 5)]
        );
        assert_eq!(t2.components.profile(), vec![4, 3]);
    }

    #[test]
    fn rotated_and_noisy_benchmarks_compose_correctly() {
        let f = builtin_benchmark_rotated(BenchmarkId::One, 21).unwrap();
        let r = f.ground_truth().unwrap().rotation.clone().unwrap();
        let plain = builtin_benchmark(BenchmarkId::One);
        let mut rng = rng_from_seed(2);
        let x = f.domain().sample(&mut rng);
        assert_relative_eq!(f.eval(&x), plain.eval(&(&r * &x)), epsilon = 1e-12);
        let g = f.grad(&x).unwrap();
        let want = r.transpose() * plain.grad(&(&r * &x)).unwrap();
        assert!((g - want).norm() < 1e-10);

        let noisy = builtin_benchmark_noisy(BenchmarkId::One, 21).unwrap();
        let dev = (noisy.eval(&x) - f.eval(&x)).abs();
        assert!(dev > 0.0 && dev < 0.1, "perturbation size {dev}");
        let check = noisy.validate_derivatives(10, 6).unwrap();
        assert!(check.max_grad_error < 1e-5);
        assert!(check.max_hess_error < 1e-5);
        assert!(noisy.ground_truth().is_some());
    }

    #[test]
    fn function_specs_round_trip_through_json() {
        let spec = FunctionSpec::random(10, 5)
            .unwrap()
            .with_rotation_seed(7)
            .with_noise(true);
        let json = serde_json::to_string(&spec).unwrap();
        let back: FunctionSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let mspec = MatrixInstanceSpec::new(3, random_pattern(3, 1).unwrap(), 4, 1, 2, 0.5)
            .unwrap();
        let json = serde_json::to_string(&mspec).unwrap();
        let back: MatrixInstanceSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, mspec);
    }
}
