//! Anchored and ANOVA decompositions of sampled functions.
//!
//! A function f on a product domain decomposes as f = Σ_u f_u over subsets
//! u of the coordinates, where each term is built from commuting projection
//! operators: f_u = Σ_{v ⊆ u} (−1)^{|u|−|v|} P_{[d]∖v} f. Substituting an
//! anchor point gives the anchored decomposition (exact, 2^{|u|} point
//! evaluations); integrating coordinates out gives the ANOVA decomposition
//! (estimated by quadrature). The module also provides the
//! integral-representation oracle for anchored terms (mixed derivative
//! against a signed box kernel), closed-form bounds on term norms in terms
//! of derivative norms, and empirical counts of vanishing derivatives.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graphs::{BlockStructure, SparsityPattern};
use crate::types::{derive_seed, rng_from_seed};

/// Largest subset size accepted by the inclusion–exclusion sums (2^|u|
/// evaluations per term).
pub const MAX_SUBSET: usize = 20;

/// Integration region: a centered Euclidean ball or an axis-aligned box.
///
/// The decomposition operations need the product structure of a box; ball
/// domains support sampling and volume queries only and are accepted where
/// points are merely evaluated, not integrated coordinate-wise.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Ball { d: usize, radius: f64 },
    Box { bounds: Vec<(f64, f64)> },
}

impl Domain {
    pub fn ball(d: usize, radius: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::EmptyInput("ball domain in dimension 0".into()));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ball radius must be positive and finite, got {radius}"
            )));
        }
        Ok(Domain::Ball { d, radius })
    }

    /// The box ⨂ᵢ [aᵢ, bᵢ].
    pub fn from_bounds(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::EmptyInput("box domain with no axes".into()));
        }
        for &(a, b) in &bounds {
            if !(a < b) || !a.is_finite() || !b.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "box axis bounds must satisfy a < b and be finite, got [{a}, {b}]"
                )));
            }
        }
        Ok(Domain::Box { bounds })
    }

    /// The symmetric box [−h, h]^d.
    pub fn symmetric_box(d: usize, half_width: f64) -> Result<Self> {
        if !(half_width > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "half width must be positive, got {half_width}"
            )));
        }
        Self::from_bounds(vec![(-half_width, half_width); d])
    }

    /// The unit box [0, 1]^d.
    pub fn unit_box(d: usize) -> Result<Self> {
        Self::from_bounds(vec![(0.0, 1.0); d])
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Ball { d, .. } => *d,
            Domain::Box { bounds } => bounds.len(),
        }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        match self {
            Domain::Ball { radius, .. } => x.norm() <= radius * (1.0 + 1e-12),
            Domain::Box { bounds } => bounds
                .iter()
                .zip(x.iter())
                .all(|(&(a, b), &xi)| xi >= a - 1e-12 && xi <= b + 1e-12),
        }
    }

    /// Geometric center (box midpoints, or the origin of the ball).
    pub fn center(&self) -> DVector<f64> {
        match self {
            Domain::Ball { d, .. } => DVector::zeros(*d),
            Domain::Box { bounds } => {
                DVector::from_iterator(bounds.len(), bounds.iter().map(|&(a, b)| 0.5 * (a + b)))
            }
        }
    }

    /// Per-axis intervals; errors on a ball, which has no product structure.
    pub fn bounds(&self) -> Result<&[(f64, f64)]> {
        match self {
            Domain::Box { bounds } => Ok(bounds),
            Domain::Ball { .. } => Err(Error::InvalidArgument(
                "operation needs a product (box) domain, got a ball".into(),
            )),
        }
    }

    /// Lebesgue volume.
    pub fn volume(&self) -> f64 {
        match self {
            Domain::Ball { d, radius } => {
                // v_d = v_{d-2} · 2πr²/d, v_0 = 1, v_1 = 2r.
                let mut even = 1.0;
                let mut odd = 2.0 * radius;
                for k in 2..=*d {
                    let next = if k % 2 == 0 { &mut even } else { &mut odd };
                    *next *= 2.0 * std::f64::consts::PI * radius * radius / k as f64;
                }
                if *d % 2 == 0 {
                    even
                } else {
                    odd
                }
            }
            Domain::Box { bounds } => bounds.iter().map(|&(a, b)| b - a).product(),
        }
    }

    /// Lebesgue volume of the sub-box over the axes in `subset` (box only).
    pub fn subset_volume(&self, subset: &[usize]) -> Result<f64> {
        let bounds = self.bounds()?;
        let mut vol = 1.0;
        for &i in subset {
            let (a, b) = *bounds.get(i).ok_or_else(|| Error::InvalidArgument(format!(
                "axis {i} out of range for dimension {}",
                bounds.len()
            )))?;
            vol *= b - a;
        }
        Ok(vol)
    }

    /// Draw a uniform point. Balls use the direction × radius^(1/d) method
    /// (rejection sampling degenerates in high dimension).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Domain::Ball { d, radius } => {
                use rand_distr::StandardNormal;
                let mut v =
                    DVector::from_fn(*d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let norm = v.norm();
                if norm == 0.0 {
                    return DVector::zeros(*d);
                }
                let r: f64 = rng.gen::<f64>().powf(1.0 / *d as f64) * radius;
                v *= r / norm;
                v
            }
            Domain::Box { bounds } => DVector::from_iterator(
                bounds.len(),
                bounds.iter().map(|&(a, b)| rng.gen_range(a..b)),
            ),
        }
    }
}

/// Known structure of a generated test function, carried alongside it so
/// experiments can score recovered patterns against the truth.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// The hidden rotation applied to the sparse representative (identity
    /// when the function is already in sparse coordinates).
    pub rotation: Option<DMatrix<f64>>,
    /// Joint support of the sparse representative's Hessian.
    pub pattern: SparsityPattern,
    /// Connected components of that support.
    pub components: BlockStructure,
}

type EvalFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type HessFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// A black-box function with optional analytic derivatives and an
/// integration domain. Cloning is cheap (closures are shared).
#[derive(Clone)]
pub struct SampledFunction {
    d: usize,
    domain: Domain,
    eval: EvalFn,
    grad: Option<GradFn>,
    hess: Option<HessFn>,
    ground_truth: Option<Arc<GroundTruth>>,
}

impl std::fmt::Debug for SampledFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SampledFunction")
            .field("d", &self.d)
            .field("domain", &self.domain)
            .field("grad", &self.grad.is_some())
            .field("hess", &self.hess.is_some())
            .field("ground_truth", &self.ground_truth.is_some())
            .finish()
    }
}

/// Worst relative finite-difference mismatch found by
/// [`SampledFunction::validate_derivatives`].
#[derive(Debug, Clone, Copy)]
pub struct DerivativeCheck {
    pub max_grad_error: f64,
    pub max_hess_error: f64,
}

impl SampledFunction {
    pub fn new(
        domain: Domain,
        eval: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            d: domain.dim(),
            domain,
            eval: Arc::new(eval),
            grad: None,
            hess: None,
            ground_truth: None,
        }
    }

    pub fn with_grad(
        mut self,
        grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn with_hess(
        mut self,
        hess: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.hess = Some(Arc::new(hess));
        self
    }

    pub fn with_ground_truth(mut self, truth: GroundTruth) -> Self {
        self.ground_truth = Some(Arc::new(truth));
        self
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.ground_truth.as_deref()
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn has_hess(&self) -> bool {
        self.hess.is_some()
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        (self.eval)(x)
    }

    pub fn grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.grad {
            Some(g) => Ok(g(x)),
            None => Err(Error::InvalidArgument(
                "function has no gradient access".into(),
            )),
        }
    }

    pub fn hess(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match &self.hess {
            Some(h) => Ok(h(x)),
            None => Err(Error::InvalidArgument(
                "function has no Hessian access".into(),
            )),
        }
    }

    /// The composition x ↦ f(Rx) with derivatives by the chain rule:
    /// ∇(f∘R)(x) = Rᵀ∇f(Rx) and ∇²(f∘R)(x) = Rᵀ∇²f(Rx)R.
    ///
    /// The domain is kept as-is; the caller is responsible for the
    /// composition making sense there (balls are rotation invariant, and
    /// the generated closed-form functions are defined globally).
    pub fn rotated(&self, r: &DMatrix<f64>) -> Result<SampledFunction> {
        if r.nrows() != self.d || r.ncols() != self.d {
            return Err(Error::DimensionMismatch {
                context: "rotation applied to function".into(),
                expected: self.d,
                got: r.nrows(),
            });
        }
        let rot = r.clone();
        let eval = self.eval.clone();
        let mut out = SampledFunction::new(self.domain.clone(), move |x| eval(&(&rot * x)));
        if let Some(g) = &self.grad {
            let g = g.clone();
            let rot = r.clone();
            out = out.with_grad(move |x| rot.transpose() * g(&(&rot * x)));
        }
        if let Some(h) = &self.hess {
            let h = h.clone();
            let rot = r.clone();
            out = out.with_hess(move |x| rot.transpose() * h(&(&rot * x)) * &rot);
        }
        Ok(out)
    }

    /// Pointwise sum f + g (with summed derivatives where both sides have
    /// them). Ground truth is dropped; the caller re-attaches if the
    /// perturbation is considered structure-preserving.
    pub fn add(&self, other: &SampledFunction) -> Result<SampledFunction> {
        if other.d != self.d {
            return Err(Error::DimensionMismatch {
                context: "sum of functions".into(),
                expected: self.d,
                got: other.d,
            });
        }
        let (ea, eb) = (self.eval.clone(), other.eval.clone());
        let mut out = SampledFunction::new(self.domain.clone(), move |x| ea(x) + eb(x));
        if let (Some(ga), Some(gb)) = (&self.grad, &other.grad) {
            let (ga, gb) = (ga.clone(), gb.clone());
            out = out.with_grad(move |x| ga(x) + gb(x));
        }
        if let (Some(ha), Some(hb)) = (&self.hess, &other.hess) {
            let (ha, hb) = (ha.clone(), hb.clone());
            out = out.with_hess(move |x| ha(x) + hb(x));
        }
        Ok(out)
    }

    /// Compare the analytic derivatives against central finite differences
    /// of `eval` at `n_points` random interior points, returning the worst
    /// relative error for each order. A missing derivative reports 0.
    pub fn validate_derivatives(&self, n_points: usize, seed: u64) -> Result<DerivativeCheck> {
        if n_points == 0 {
            return Err(Error::EmptyInput("derivative validation with 0 points".into()));
        }
        let mut rng = rng_from_seed(seed);
        let mut worst_g = 0.0f64;
        let mut worst_h = 0.0f64;
        let h_g = 1e-5;
        let h_h = 1e-4;
        for _ in 0..n_points {
            // Shrink toward the center so FD stencils stay in the domain.
            let x = self.domain.center() + (self.domain.sample(&mut rng) - self.domain.center()) * 0.9;
            if let Some(g) = &self.grad {
                let analytic = g(&x);
                for i in 0..self.d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h_g;
                    xm[i] -= h_g;
                    let fd = (self.eval(&xp) - self.eval(&xm)) / (2.0 * h_g);
                    if !fd.is_finite() {
                        return Err(Error::NonFinite("finite difference of eval".into()));
                    }
                    let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
                    worst_g = worst_g.max(rel);
                }
            }
            if let Some(h) = &self.hess {
                let analytic = h(&x);
                for j in 0..self.d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h_h;
                    xm[j] -= h_h;
                    // FD of the gradient when available (second-order
                    // accurate in each entry), FD of eval otherwise.
                    if let Some(g) = &self.grad {
                        let col = (g(&xp) - g(&xm)) / (2.0 * h_h);
                        for i in 0..self.d {
                            let rel =
                                (col[i] - analytic[(i, j)]).abs() / analytic[(i, j)].abs().max(1.0);
                            worst_h = worst_h.max(rel);
                        }
                    } else {
                        for i in 0..self.d {
                            let mut xpp = xp.clone();
                            let mut xpm = xp.clone();
                            let mut xmp = xm.clone();
                            let mut xmm = xm.clone();
                            xpp[i] += h_h;
                            xpm[i] -= h_h;
                            xmp[i] += h_h;
                            xmm[i] -= h_h;
                            let fd = (self.eval(&xpp) - self.eval(&xpm) - self.eval(&xmp)
                                + self.eval(&xmm))
                                / (4.0 * h_h * h_h);
                            let rel =
                                (fd - analytic[(i, j)]).abs() / analytic[(i, j)].abs().max(1.0);
                            worst_h = worst_h.max(rel);
                        }
                    }
                }
            }
        }
        Ok(DerivativeCheck {
            max_grad_error: worst_g,
            max_hess_error: worst_h,
        })
    }
}

/// Anchor point for the anchored decomposition; validated to lie in the
/// domain at construction.
#[derive(Debug, Clone)]
pub struct AnchorConfig {
    c: DVector<f64>,
}

impl AnchorConfig {
    pub fn new(c: DVector<f64>, domain: &Domain) -> Result<Self> {
        if c.len() != domain.dim() {
            return Err(Error::DimensionMismatch {
                context: "anchor point".into(),
                expected: domain.dim(),
                got: c.len(),
            });
        }
        if !domain.contains(&c) {
            return Err(Error::InvalidArgument(
                "anchor point lies outside the domain".into(),
            ));
        }
        Ok(Self { c })
    }

    /// Anchor at the domain center.
    pub fn center(domain: &Domain) -> Self {
        Self {
            c: domain.center(),
        }
    }

    pub fn point(&self) -> &DVector<f64> {
        &self.c
    }
}

/// How an integral is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureKind {
    /// Uniform Monte Carlo; `n` is the sample count.
    MonteCarlo,
    /// Tensorized Gauss–Legendre; `n` is the node count per axis. Only
    /// allowed when the integration sub-dimension is at most 4.
    TensorGauss,
}

#[derive(Debug, Clone, Copy)]
pub struct QuadratureSpec {
    pub kind: QuadratureKind,
    pub n: usize,
    pub seed: u64,
}

impl QuadratureSpec {
    pub fn monte_carlo(n: usize, seed: u64) -> Self {
        Self {
            kind: QuadratureKind::MonteCarlo,
            n,
            seed,
        }
    }

    pub fn tensor_gauss(nodes_per_axis: usize) -> Self {
        Self {
            kind: QuadratureKind::TensorGauss,
            n: nodes_per_axis,
            seed: 0,
        }
    }
}

const MAX_TENSOR_SUBDIM: usize = 4;
const MAX_TENSOR_POINTS: usize = 4_000_000;

/// Gauss–Legendre nodes and weights on [−1, 1], by Newton iteration on the
/// Legendre recurrence (weights sum to 2).
pub fn gauss_legendre(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::EmptyInput("0-node quadrature rule".into()));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n and P_n' by the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = pk;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        weights[i] = w;
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = w;
    }
    Ok((nodes, weights))
}

/// Canonical subset form: sorted, deduplicated, every index < d.
fn canonical_subset(u: &[usize], d: usize) -> Result<Vec<usize>> {
    let set: BTreeSet<usize> = u.iter().copied().collect();
    if set.len() != u.len() {
        return Err(Error::InvalidArgument(format!(
            "subset {u:?} has repeated indices"
        )));
    }
    if let Some(&worst) = set.iter().next_back() {
        if worst >= d {
            return Err(Error::InvalidArgument(format!(
                "subset index {worst} out of range for dimension {d}"
            )));
        }
    }
    Ok(set.into_iter().collect())
}

fn check_subset_budget(u: &[usize]) -> Result<()> {
    if u.len() > MAX_SUBSET {
        return Err(Error::TooLarge {
            context: "decomposition subset size (2^|u| evaluations)".into(),
            got: u.len(),
            limit: MAX_SUBSET,
        });
    }
    Ok(())
}

/// Anchored decomposition term f_{u,c}(x) = Σ_{v⊆u} (−1)^{|u|−|v|}
/// f(x_v, c_{[d]∖v}): coordinates in v come from x, all others from the
/// anchor. Exact up to round-off; costs 2^{|u|} evaluations.
pub fn anchored_term(
    f: &SampledFunction,
    u: &[usize],
    cfg: &AnchorConfig,
    x: &DVector<f64>,
) -> Result<f64> {
    let d = f.d();
    let u = canonical_subset(u, d)?;
    check_subset_budget(&u)?;
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            context: "anchored term evaluation point".into(),
            expected: d,
            got: x.len(),
        });
    }
    if cfg.c.len() != d {
        return Err(Error::DimensionMismatch {
            context: "anchor point".into(),
            expected: d,
            got: cfg.c.len(),
        });
    }
    let mut total = 0.0;
    let mut point = cfg.c.clone();
    for mask in 0..(1usize << u.len()) {
        point.copy_from(&cfg.c);
        let mut v_size = 0;
        for (bit, &idx) in u.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                point[idx] = x[idx];
                v_size += 1;
            }
        }
        let sign = if (u.len() - v_size) % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * f.eval(&point);
    }
    Ok(total)
}

/// ANOVA decomposition term f_{u,A}(x) = Σ_{v⊆u} (−1)^{|u|−|v|}
/// ∫ f(x_v, y_{[d]∖v}) dλ_{[d]∖v}(y), with λ the normalized Lebesgue
/// measure per axis (so projections are means). Needs a box domain.
///
/// Monte Carlo draws one shared point stream and reuses it across all
/// 2^{|u|} subsets (common random numbers): the signed sum then telescopes
/// pointwise, so terms that vanish exactly — coordinates the function does
/// not couple — estimate to exactly zero instead of O(n^{-1/2}) noise.
pub fn anova_term(
    f: &SampledFunction,
    u: &[usize],
    x: &DVector<f64>,
    q: &QuadratureSpec,
) -> Result<f64> {
    let d = f.d();
    let u = canonical_subset(u, d)?;
    check_subset_budget(&u)?;
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            context: "anova term evaluation point".into(),
            expected: d,
            got: x.len(),
        });
    }
    let bounds = f.domain().bounds()?.to_vec();

    match q.kind {
        QuadratureKind::MonteCarlo => {
            if q.n == 0 {
                return Err(Error::EmptyInput("monte carlo with 0 samples".into()));
            }
            let mut rng = rng_from_seed(q.seed);
            let mut total = 0.0;
            let mut point = DVector::zeros(d);
            let mut y = DVector::zeros(d);
            for _ in 0..q.n {
                for (i, &(a, b)) in bounds.iter().enumerate() {
                    y[i] = rng.gen_range(a..b);
                }
                let mut signed = 0.0;
                for mask in 0..(1usize << u.len()) {
                    point.copy_from(&y);
                    let mut v_size = 0;
                    for (bit, &idx) in u.iter().enumerate() {
                        if mask & (1 << bit) != 0 {
                            point[idx] = x[idx];
                            v_size += 1;
                        }
                    }
                    let sign = if (u.len() - v_size) % 2 == 0 { 1.0 } else { -1.0 };
                    signed += sign * f.eval(&point);
                }
                total += signed;
            }
            Ok(total / q.n as f64)
        }
        QuadratureKind::TensorGauss => {
            // Integrate the complement of u once per subset v ⊆ u; the
            // largest sub-dimension is d − 0 when v = ∅... except the
            // shared coordinates outside u are always integrated, so the
            // sub-dimension is d − |v| ≤ d. Tensorized rules explode past
            // dimension 4.
            let max_subdim = d;
            if max_subdim > MAX_TENSOR_SUBDIM {
                return Err(Error::TooLarge {
                    context: "tensor quadrature sub-dimension".into(),
                    got: max_subdim,
                    limit: MAX_TENSOR_SUBDIM,
                });
            }
            let (nodes, weights) = gauss_legendre(q.n)?;
            let mut total = 0.0;
            for mask in 0..(1usize << u.len()) {
                let mut v = Vec::new();
                for (bit, &idx) in u.iter().enumerate() {
                    if mask & (1 << bit) != 0 {
                        v.push(idx);
                    }
                }
                let comp: Vec<usize> = (0..d).filter(|i| !v.contains(i)).collect();
                let sign = if (u.len() - v.len()) % 2 == 0 { 1.0 } else { -1.0 };
                total += sign * projected_mean_gauss(f, &v, &comp, x, &bounds, &nodes, &weights)?;
            }
            Ok(total)
        }
    }
}

/// Mean of f over the axes in `comp` (normalized measure), the remaining
/// coordinates fixed from x, by a tensorized Gauss–Legendre rule.
fn projected_mean_gauss(
    f: &SampledFunction,
    fixed: &[usize],
    comp: &[usize],
    x: &DVector<f64>,
    bounds: &[(f64, f64)],
    nodes: &[f64],
    weights: &[f64],
) -> Result<f64> {
    let m = comp.len();
    let n = nodes.len();
    let points = n.checked_pow(m as u32).unwrap_or(usize::MAX);
    if points > MAX_TENSOR_POINTS {
        return Err(Error::TooLarge {
            context: "tensor quadrature point count".into(),
            got: points,
            limit: MAX_TENSOR_POINTS,
        });
    }
    let mut point = x.clone();
    for &i in fixed {
        point[i] = x[i];
    }
    if m == 0 {
        return Ok(f.eval(&point));
    }
    let mut total = 0.0;
    let mut idx = vec![0usize; m];
    loop {
        let mut w = 1.0;
        for (axis, &i) in comp.iter().enumerate() {
            let (a, b) = bounds[i];
            // Map the [−1,1] node into [a,b]; normalized measure divides
            // by (b−a), so each axis contributes weight w_k / 2.
            point[i] = 0.5 * (a + b) + 0.5 * (b - a) * nodes[idx[axis]];
            w *= 0.5 * weights[idx[axis]];
        }
        total += w * f.eval(&point);
        // Odometer increment.
        let mut axis = 0;
        loop {
            idx[axis] += 1;
            if idx[axis] < n {
                break;
            }
            idx[axis] = 0;
            axis += 1;
            if axis == m {
                return Ok(total);
            }
        }
    }
}

/// Anchored term via its integral representation: f_{u,c}(x) equals the
/// integral of the mixed derivative ∂_u f(t_u, c_rest) over the rectangle
/// between c_u and x_u, signed by ∏ sign(x_i − c_i) (plain, unnormalized
/// Lebesgue measure — the sign kernel already carries the geometry).
/// Serves as an independent oracle for [`anchored_term`].
///
/// The mixed derivative comes from the analytic gradient (|u| = 1), the
/// analytic Hessian (|u| = 2), or a central finite difference of the
/// Hessian along the third axis (|u| = 3).
pub fn anchored_term_via_derivative(
    f: &SampledFunction,
    u: &[usize],
    cfg: &AnchorConfig,
    x: &DVector<f64>,
    q: &QuadratureSpec,
) -> Result<f64> {
    let d = f.d();
    let u = canonical_subset(u, d)?;
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            context: "anchored term evaluation point".into(),
            expected: d,
            got: x.len(),
        });
    }
    if u.len() > 3 {
        return Err(Error::TooLarge {
            context: "derivative-oracle subset size".into(),
            got: u.len(),
            limit: 3,
        });
    }
    if u.is_empty() {
        return Ok(f.eval(&cfg.c));
    }
    match u.len() {
        1 if !f.has_grad() => {
            return Err(Error::InvalidArgument(
                "derivative oracle needs gradient access for |u| = 1".into(),
            ))
        }
        2 | 3 if !f.has_hess() => {
            return Err(Error::InvalidArgument(
                "derivative oracle needs Hessian access for |u| ≥ 2".into(),
            ))
        }
        _ => {}
    }

    let mut sign = 1.0;
    let mut lo = Vec::with_capacity(u.len());
    let mut hi = Vec::with_capacity(u.len());
    for &i in &u {
        let (a, b) = (cfg.c[i], x[i]);
        if a == b {
            return Ok(0.0); // Degenerate rectangle: the kernel support is null.
        }
        if b < a {
            sign = -sign;
        }
        lo.push(a.min(b));
        hi.push(a.max(b));
    }
    let volume: f64 = lo.iter().zip(&hi).map(|(a, b)| b - a).product();

    let mixed = |point: &DVector<f64>| -> Result<f64> {
        match u.len() {
            1 => Ok(f.grad(point)?[u[0]]),
            2 => Ok(f.hess(point)?[(u[0], u[1])]),
            _ => {
                let h = 5e-4;
                let mut p = point.clone();
                let mut m = point.clone();
                p[u[2]] += h;
                m[u[2]] -= h;
                Ok((f.hess(&p)?[(u[0], u[1])] - f.hess(&m)?[(u[0], u[1])]) / (2.0 * h))
            }
        }
    };

    let base = cfg.c.clone();
    match q.kind {
        QuadratureKind::MonteCarlo => {
            if q.n == 0 {
                return Err(Error::EmptyInput("monte carlo with 0 samples".into()));
            }
            let mut rng = rng_from_seed(q.seed);
            let mut total = 0.0;
            let mut point = base.clone();
            for _ in 0..q.n {
                point.copy_from(&base);
                for (k, &i) in u.iter().enumerate() {
                    point[i] = rng.gen_range(lo[k]..hi[k]);
                }
                total += mixed(&point)?;
            }
            Ok(sign * volume * total / q.n as f64)
        }
        QuadratureKind::TensorGauss => {
            let (nodes, weights) = gauss_legendre(q.n)?;
            let m = u.len();
            let mut idx = vec![0usize; m];
            let mut point = base.clone();
            let mut total = 0.0;
            loop {
                let mut w = 1.0;
                for (axis, &i) in u.iter().enumerate() {
                    let (a, b) = (lo[axis], hi[axis]);
                    point[i] = 0.5 * (a + b) + 0.5 * (b - a) * nodes[idx[axis]];
                    w *= 0.5 * (b - a) * weights[idx[axis]];
                }
                total += w * mixed(&point)?;
                let mut axis = 0;
                loop {
                    idx[axis] += 1;
                    if idx[axis] < nodes.len() {
                        break;
                    }
                    idx[axis] = 0;
                    axis += 1;
                    if axis == m {
                        return Ok(sign * total);
                    }
                }
            }
        }
    }
}

/// Which of the three closed-form term bounds to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermBoundKind {
    /// ‖f_{u,c}‖_∞ ≤ 2^{|u|−|v|} ‖∂_v f‖_∞ λ_v(D_v)
    AnchoredInf,
    /// ‖f_{u,A}‖_∞ ≤ 2^{|u|−|v|} ‖∂_v f‖_∞ λ(D) λ_v(D_v)
    AnovaInf,
    /// ‖f_{u,A}‖_1 ≤ 2^{|u|−|v|} ‖∂_v f‖_1 λ_u(D_u) λ_v(D_v)
    AnovaOne,
}

/// Lebesgue volumes entering the term bounds.
#[derive(Debug, Clone, Copy)]
pub struct TermVolumes {
    /// λ_v(D_v)
    pub subset_v: f64,
    /// λ(D)
    pub domain: f64,
    /// λ_u(D_u)
    pub subset_u: f64,
}

/// Closed-form bound on a decomposition term norm from a derivative norm:
/// any subset v ⊆ u whose mixed derivative is small forces the whole term
/// f_u to be small.
pub fn term_bound(
    u: &[usize],
    v: &[usize],
    deriv_norm: f64,
    vols: &TermVolumes,
    kind: TermBoundKind,
) -> Result<f64> {
    let us: BTreeSet<usize> = u.iter().copied().collect();
    let vs: BTreeSet<usize> = v.iter().copied().collect();
    if !vs.is_subset(&us) {
        return Err(Error::InvalidArgument(format!(
            "bound subset {v:?} is not contained in {u:?}"
        )));
    }
    if deriv_norm < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "derivative norm must be nonnegative, got {deriv_norm}"
        )));
    }
    let factor = 2f64.powi((us.len() - vs.len()) as i32);
    Ok(match kind {
        TermBoundKind::AnchoredInf => factor * deriv_norm * vols.subset_v,
        TermBoundKind::AnovaInf => factor * deriv_norm * vols.domain * vols.subset_v,
        TermBoundKind::AnovaOne => factor * deriv_norm * vols.subset_u * vols.subset_v,
    })
}

/// Empirical p-norms: the ∞-norm of a list of sampled values is the max
/// absolute value, the 1-norm the mean absolute value (a Monte Carlo
/// estimate of the normalized-Lebesgue integral).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PNorm {
    One,
    Infinity,
}

impl PNorm {
    pub fn combine(&self, values: impl IntoIterator<Item = f64>) -> f64 {
        match self {
            PNorm::One => {
                let mut sum = 0.0;
                let mut count = 0usize;
                for v in values {
                    sum += v.abs();
                    count += 1;
                }
                if count == 0 {
                    0.0
                } else {
                    sum / count as f64
                }
            }
            PNorm::Infinity => values.into_iter().fold(0.0f64, |m, v| m.max(v.abs())),
        }
    }
}

/// Count coordinates and coordinate pairs whose derivatives are empirically
/// negligible: G = #{i : ‖∂_i f‖_p ≤ tol}, H = #{{i,j}, i ≠ j :
/// ‖∂_{ij} f‖_p ≤ tol}, with norms taken over the given sample points.
pub fn derivative_smallness_counts(
    f: &SampledFunction,
    points: &[DVector<f64>],
    p: PNorm,
    tol: f64,
) -> Result<(usize, usize)> {
    if points.is_empty() {
        return Err(Error::EmptyInput("derivative counts need sample points".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let d = f.d();
    let mut grads = Vec::with_capacity(points.len());
    let mut hessians = Vec::with_capacity(points.len());
    for x in points {
        grads.push(f.grad(x)?);
        hessians.push(f.hess(x)?);
    }
    let mut g_count = 0;
    for i in 0..d {
        let norm = p.combine(grads.iter().map(|g| g[i]));
        if norm <= tol {
            g_count += 1;
        }
    }
    let mut h_count = 0;
    for i in 0..d {
        for j in i + 1..d {
            let norm = p.combine(hessians.iter().map(|h| h[(i, j)]));
            if norm <= tol {
                h_count += 1;
            }
        }
    }
    Ok((g_count, h_count))
}

/// Empirical L^p norm of the ANOVA term f_{u,A} over `n_points` uniform
/// domain points (p = 1: mean |·|; p = ∞: max |·|). Each point gets a
/// deterministically derived quadrature seed.
pub fn anova_term_norm(
    f: &SampledFunction,
    u: &[usize],
    p: PNorm,
    n_points: usize,
    q: &QuadratureSpec,
    seed: u64,
) -> Result<f64> {
    if n_points == 0 {
        return Err(Error::EmptyInput("norm over 0 points".into()));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 0x704e)); // point stream
    let mut values = Vec::with_capacity(n_points);
    for k in 0..n_points {
        let x = f.domain().sample(&mut rng);
        let mut qk = *q;
        qk.seed = derive_seed(q.seed, k as u64);
        values.push(anova_term(f, u, &x, &qk)?);
    }
    Ok(p.combine(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn product_fn() -> SampledFunction {
        // f = x₁x₂ on [−1,1]².
        let domain = Domain::symmetric_box(2, 1.0).unwrap();
        SampledFunction::new(domain, |x| x[0] * x[1])
            .with_grad(|x| DVector::from_vec(vec![x[1], x[0]]))
            .with_hess(|x| {
                let mut h = DMatrix::zeros(2, 2);
                let _ = x;
                h[(0, 1)] = 1.0;
                h[(1, 0)] = 1.0;
                h
            })
    }

    #[test]
    fn anchored_term_on_a_pure_product() {
        let f = product_fn();
        let cfg = AnchorConfig::center(f.domain());
        let x = DVector::from_vec(vec![0.3, 0.5]);
        let t12 = anchored_term(&f, &[0, 1], &cfg, &x).unwrap();
        assert_relative_eq!(t12, 0.15, epsilon = 1e-14);
        let t1 = anchored_term(&f, &[0], &cfg, &x).unwrap();
        assert_relative_eq!(t1, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn anchored_term_of_the_exponential() {
        let domain = Domain::symmetric_box(2, 1.5).unwrap();
        let f = SampledFunction::new(domain, |x| (x[0] + x[1]).exp());
        let cfg = AnchorConfig::center(f.domain());
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let want = std::f64::consts::E * std::f64::consts::E - 2.0 * std::f64::consts::E + 1.0;
        let got = anchored_term(&f, &[0, 1], &cfg, &x).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn anchored_terms_reconstruct_the_function() {
        // Σ_{u ⊆ [d]} f_{u,c}(x) = f(x) exactly, by telescoping.
        for d in 1..=4 {
            let domain = Domain::symmetric_box(d, 1.0).unwrap();
            let f = SampledFunction::new(domain, move |x: &DVector<f64>| {
                let mut v = 1.0;
                for i in 0..x.len() {
                    v += ((i + 1) as f64 * x[i]).sin();
                    if i + 1 < x.len() {
                        v += x[i] * x[i + 1] * x[i].cos();
                    }
                }
                v
            });
            let cfg = AnchorConfig::new(
                DVector::from_fn(d, |i, _| 0.1 * (i as f64 + 1.0)),
                f.domain(),
            )
            .unwrap();
            let mut rng = rng_from_seed(5);
            let x = f.domain().sample(&mut rng);
            let mut total = 0.0;
            for mask in 0..(1usize << d) {
                let u: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
                total += anchored_term(&f, &u, &cfg, &x).unwrap();
            }
            assert_relative_eq!(total, f.eval(&x), epsilon = 1e-12);
        }
    }

    #[test]
    fn anova_term_monte_carlo_matches_known_values() {
        let f = product_fn();
        let x = DVector::from_vec(vec![0.3, 0.5]);
        let q = QuadratureSpec::monte_carlo(20_000, 11);
        // Lower-order means vanish by odd symmetry, so f_{12,A} = x₁x₂.
        let t12 = anova_term(&f, &[0, 1], &x, &q).unwrap();
        assert!((t12 - 0.15).abs() < 0.01, "got {t12}");
        let t1 = anova_term(&f, &[0], &x, &q).unwrap();
        assert!(t1.abs() < 0.01, "got {t1}");

        // Mean of x₁² + x₂ over [−1,1]² is 1/3.
        let domain = Domain::symmetric_box(2, 1.0).unwrap();
        let g = SampledFunction::new(domain, |x| x[0] * x[0] + x[1]);
        let t0 = anova_term(&g, &[], &x, &q).unwrap();
        assert!((t0 - 1.0 / 3.0).abs() < 0.02, "got {t0}");
    }

    #[test]
    fn anova_term_tensor_gauss_is_high_accuracy() {
        let f = product_fn();
        let x = DVector::from_vec(vec![0.3, 0.5]);
        let q = QuadratureSpec::tensor_gauss(16);
        assert_relative_eq!(anova_term(&f, &[0, 1], &x, &q).unwrap(), 0.15, epsilon = 1e-12);
        assert_relative_eq!(anova_term(&f, &[0], &x, &q).unwrap(), 0.0, epsilon = 1e-12);
        // Tensor rules refuse high-dimensional complements.
        let domain = Domain::symmetric_box(5, 1.0).unwrap();
        let g = SampledFunction::new(domain, |x| x.iter().sum());
        let err = anova_term(&g, &[0], &DVector::zeros(5), &q);
        assert!(matches!(err, Err(Error::TooLarge { .. })));
    }

    #[test]
    fn shared_stream_makes_vanishing_terms_exact() {
        // f = g₁(x₁,x₂) + g₂(x₂,x₃) has no {1,3} coupling, so every term
        // with {1,3} ⊆ u must vanish; common random numbers make the Monte
        // Carlo estimate cancel pointwise, not just in expectation.
        let domain = Domain::symmetric_box(3, 1.0).unwrap();
        let f = SampledFunction::new(domain, |x| {
            (x[0] * x[1]).sin() + (x[1] + 2.0 * x[2]).cos() * x[1]
        });
        let x = DVector::from_vec(vec![0.4, -0.2, 0.7]);
        let q = QuadratureSpec::monte_carlo(500, 3);
        for u in [vec![0, 2], vec![0, 1, 2]] {
            let t = anova_term(&f, &u, &x, &q).unwrap();
            assert!(t.abs() < 1e-12, "u={u:?} t={t}");
        }
        // The anchored terms vanish exactly as well.
        let cfg = AnchorConfig::center(f.domain());
        for u in [vec![0, 2], vec![0, 1, 2]] {
            let t = anchored_term(&f, &u, &cfg, &x).unwrap();
            assert!(t.abs() < 1e-13, "u={u:?} t={t}");
        }
    }

    #[test]
    fn derivative_oracle_agrees_with_inclusion_exclusion() {
        let f = product_fn();
        let cfg = AnchorConfig::center(f.domain());
        let x = DVector::from_vec(vec![0.3, 0.5]);
        let q = QuadratureSpec::tensor_gauss(8);
        let got = anchored_term_via_derivative(&f, &[0, 1], &cfg, &x, &q).unwrap();
        assert_relative_eq!(got, 0.15, epsilon = 1e-12);

        // u = ∅ reduces to evaluation at the anchor.
        let e = anchored_term_via_derivative(&f, &[], &cfg, &x, &q).unwrap();
        assert_relative_eq!(e, f.eval(cfg.point()), epsilon = 1e-15);

        // sin in one variable: ∫₀¹ cos = sin(1).
        let domain = Domain::symmetric_box(2, 2.0).unwrap();
        let g = SampledFunction::new(domain, |x| x[0].sin())
            .with_grad(|x| DVector::from_vec(vec![x[0].cos(), 0.0]));
        let cfg = AnchorConfig::center(g.domain());
        let x = DVector::from_vec(vec![1.0, 0.3]);
        let got = anchored_term_via_derivative(&g, &[0], &cfg, &x, &q).unwrap();
        assert_relative_eq!(got, 1.0f64.sin(), epsilon = 1e-10);

        // Reversed orientation flips the kernel sign consistently.
        let xm = DVector::from_vec(vec![-1.0, 0.3]);
        let got = anchored_term_via_derivative(&g, &[0], &cfg, &xm, &q).unwrap();
        assert_relative_eq!(got, (-1.0f64).sin(), epsilon = 1e-10);
    }

    #[test]
    fn derivative_oracle_matches_anchored_terms_on_a_smooth_mix() {
        let domain = Domain::symmetric_box(3, 1.0).unwrap();
        let f = SampledFunction::new(domain, |x| {
            (x[0] + 0.5 * x[1]).sin() * (1.0 + x[2] * x[2]) + x[0] * x[2]
        })
        .with_grad(|x| {
            let s = (x[0] + 0.5 * x[1]).cos();
            DVector::from_vec(vec![
                s * (1.0 + x[2] * x[2]) + x[2],
                0.5 * s * (1.0 + x[2] * x[2]),
                (x[0] + 0.5 * x[1]).sin() * 2.0 * x[2] + x[0],
            ])
        })
        .with_hess(|x| {
            let sin = (x[0] + 0.5 * x[1]).sin();
            let cos = (x[0] + 0.5 * x[1]).cos();
            let w = 1.0 + x[2] * x[2];
            let mut h = DMatrix::zeros(3, 3);
            h[(0, 0)] = -sin * w;
            h[(0, 1)] = -0.5 * sin * w;
            h[(0, 2)] = cos * 2.0 * x[2] + 1.0;
            h[(1, 1)] = -0.25 * sin * w;
            h[(1, 2)] = 0.5 * cos * 2.0 * x[2];
            h[(2, 2)] = sin * 2.0;
            h[(1, 0)] = h[(0, 1)];
            h[(2, 0)] = h[(0, 2)];
            h[(2, 1)] = h[(1, 2)];
            h
        });
        let check = f.validate_derivatives(20, 2).unwrap();
        assert!(check.max_grad_error < 1e-6, "grad {}", check.max_grad_error);
        assert!(check.max_hess_error < 1e-6, "hess {}", check.max_hess_error);

        let cfg =
            AnchorConfig::new(DVector::from_vec(vec![0.1, -0.2, 0.3]), f.domain()).unwrap();
        let x = DVector::from_vec(vec![0.8, 0.6, -0.5]);
        let q = QuadratureSpec::tensor_gauss(24);
        for u in [
            vec![0],
            vec![1],
            vec![2],
            vec![0, 1],
            vec![0, 2],
            vec![1, 2],
            vec![0, 1, 2],
        ] {
            let direct = anchored_term(&f, &u, &cfg, &x).unwrap();
            let oracle = anchored_term_via_derivative(&f, &u, &cfg, &x, &q).unwrap();
            let tol = if u.len() == 3 { 1e-5 } else { 1e-8 };
            assert!(
                (direct - oracle).abs() < tol,
                "u={u:?} direct={direct} oracle={oracle}"
            );
        }
    }

    #[test]
    fn averaging_anchored_terms_over_anchors_gives_the_anova_term() {
        let domain = Domain::symmetric_box(2, 1.0).unwrap();
        let f = SampledFunction::new(domain, |x| (x[0] + 1.5).powi(2) * (x[1] * 2.0).sin() + x[0]);
        let x = DVector::from_vec(vec![0.4, -0.3]);
        let u = vec![0usize, 1];
        let n = 100_000;

        let anova = anova_term(&f, &u, &x, &QuadratureSpec::monte_carlo(n, 17)).unwrap();

        let mut rng = rng_from_seed(18);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let c = AnchorConfig::new(f.domain().sample(&mut rng), f.domain()).unwrap();
            let t = anchored_term(&f, &u, &c, &x).unwrap();
            sum += t;
            sumsq += t * t;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        // Both estimators target the same value; allow 3 standard errors
        // for each plus a floor for the anova-side noise.
        assert!(
            (anova - mean).abs() <= 6.0 * se + 1e-3,
            "anova={anova} anchored-avg={mean} se={se}"
        );
    }

    #[test]
    fn term_bounds_match_the_closed_forms() {
        let vols = TermVolumes {
            subset_v: 1.0,
            domain: 1.0,
            subset_u: 1.0,
        };
        assert_relative_eq!(
            term_bound(&[0], &[0], 1.0, &vols, TermBoundKind::AnchoredInf).unwrap(),
            1.0
        );
        assert_relative_eq!(
            term_bound(&[0, 1], &[0], 1.0, &vols, TermBoundKind::AnchoredInf).unwrap(),
            2.0
        );
        assert_relative_eq!(
            term_bound(&[0, 1, 2], &[0], 0.5, &vols, TermBoundKind::AnovaOne).unwrap(),
            2.0
        );
        assert!(term_bound(&[0], &[1], 1.0, &vols, TermBoundKind::AnchoredInf).is_err());
    }

    #[test]
    fn anchored_terms_respect_the_infinity_bound() {
        // |f_{u,c}(x)| ≤ 2^{|u|−|v|} ‖∂_v f‖_∞ λ_v(D_v) for every v ⊆ u.
        let domain = Domain::symmetric_box(3, 1.0).unwrap();
        let f = SampledFunction::new(domain, |x| {
            (2.0 * x[0]).sin() * x[1] + x[1] * x[2] * x[2] + 0.5 * x[0]
        })
        .with_grad(|x| {
            DVector::from_vec(vec![
                2.0 * (2.0 * x[0]).cos() * x[1] + 0.5,
                (2.0 * x[0]).sin() + x[2] * x[2],
                2.0 * x[1] * x[2],
            ])
        })
        .with_hess(|x| {
            let mut h = DMatrix::zeros(3, 3);
            h[(0, 0)] = -4.0 * (2.0 * x[0]).sin() * x[1];
            h[(0, 1)] = 2.0 * (2.0 * x[0]).cos();
            h[(1, 2)] = 2.0 * x[2];
            h[(2, 2)] = 2.0 * x[1];
            h[(1, 0)] = h[(0, 1)];
            h[(2, 1)] = h[(1, 2)];
            h
        });
        let cfg = AnchorConfig::center(f.domain());
        let mut rng = rng_from_seed(4);
        // Derivative sup-norms estimated over a sample cloud.
        let cloud: Vec<DVector<f64>> = (0..400).map(|_| f.domain().sample(&mut rng)).collect();
        for u in [vec![0usize], vec![1], vec![0, 1], vec![1, 2], vec![0, 1, 2]] {
            let x = f.domain().sample(&mut rng);
            let term = anchored_term(&f, &u, &cfg, &x).unwrap().abs();
            for mask in 1..(1usize << u.len()) {
                let v: Vec<usize> = u
                    .iter()
                    .enumerate()
                    .filter(|(b, _)| mask & (1 << b) != 0)
                    .map(|(_, &i)| i)
                    .collect();
                let deriv_norm = match v.len() {
                    1 => PNorm::Infinity
                        .combine(cloud.iter().map(|p| f.grad(p).unwrap()[v[0]])),
                    2 => PNorm::Infinity
                        .combine(cloud.iter().map(|p| f.hess(p).unwrap()[(v[0], v[1])])),
                    _ => continue,
                };
                let vols = TermVolumes {
                    subset_v: f.domain().subset_volume(&v).unwrap(),
                    domain: f.domain().volume(),
                    subset_u: f.domain().subset_volume(&u).unwrap(),
                };
                let bound =
                    term_bound(&u, &v, deriv_norm, &vols, TermBoundKind::AnchoredInf).unwrap();
                assert!(
                    term <= bound + 1e-9,
                    "u={u:?} v={v:?} term={term} bound={bound}"
                );
            }
        }
    }

    #[test]
    fn smallness_counts_on_a_single_coordinate_function() {
        let domain = Domain::symmetric_box(3, 1.0).unwrap();
        let f = SampledFunction::new(domain, |x| x[0])
            .with_grad(|_| DVector::from_vec(vec![1.0, 0.0, 0.0]))
            .with_hess(|_| DMatrix::zeros(3, 3));
        let mut rng = rng_from_seed(2);
        let points: Vec<DVector<f64>> = (0..100).map(|_| f.domain().sample(&mut rng)).collect();
        for p in [PNorm::One, PNorm::Infinity] {
            let (g, h) = derivative_smallness_counts(&f, &points, p, 1e-4).unwrap();
            assert_eq!((g, h), (2, 3));
        }
        assert!(derivative_smallness_counts(&f, &[], PNorm::One, 1e-4).is_err());
    }

    #[test]
    fn rotation_composition_uses_the_chain_rule() {
        let domain = Domain::ball(3, 2.0).unwrap();
        let f = SampledFunction::new(domain, |x| {
            (x[0] * x[1]).sin() + x[2] * x[2] * x[0]
        })
        .with_grad(|x| {
            DVector::from_vec(vec![
                (x[0] * x[1]).cos() * x[1] + x[2] * x[2],
                (x[0] * x[1]).cos() * x[0],
                2.0 * x[2] * x[0],
            ])
        })
        .with_hess(|x| {
            let c = (x[0] * x[1]).cos();
            let s = (x[0] * x[1]).sin();
            let mut h = DMatrix::zeros(3, 3);
            h[(0, 0)] = -s * x[1] * x[1];
            h[(0, 1)] = c - s * x[0] * x[1];
            h[(0, 2)] = 2.0 * x[2];
            h[(1, 1)] = -s * x[0] * x[0];
            h[(2, 2)] = 2.0 * x[0];
            h[(1, 0)] = h[(0, 1)];
            h[(2, 0)] = h[(0, 2)];
            h
        });
        let mut rng = rng_from_seed(9);
        let r = crate::linalg::haar_rotation(3, &mut rng);
        let fr = f.rotated(&r).unwrap();
        for _ in 0..10 {
            let x = fr.domain().sample(&mut rng);
            let rx = &r * &x;
            assert_relative_eq!(fr.eval(&x), f.eval(&rx), epsilon = 1e-12);
            let g = fr.grad(&x).unwrap();
            let want_g = r.transpose() * f.grad(&rx).unwrap();
            assert!((g - want_g).norm() < 1e-10);
            let h = fr.hess(&x).unwrap();
            let want_h = r.transpose() * f.hess(&rx).unwrap() * &r;
            assert!((h - want_h).norm() < 1e-10);
        }
        let check = fr.validate_derivatives(10, 3).unwrap();
        assert!(check.max_grad_error < 1e-6);
        assert!(check.max_hess_error < 1e-5);
    }

    #[test]
    fn domain_geometry() {
        let b1 = Domain::ball(1, 2.0).unwrap();
        let b2 = Domain::ball(2, 2.0).unwrap();
        let b3 = Domain::ball(3, 2.0).unwrap();
        assert_relative_eq!(b1.volume(), 4.0, epsilon = 1e-12);
        assert_relative_eq!(b2.volume(), std::f64::consts::PI * 4.0, epsilon = 1e-12);
        assert_relative_eq!(
            b3.volume(),
            4.0 / 3.0 * std::f64::consts::PI * 8.0,
            epsilon = 1e-12
        );
        let bx = Domain::from_bounds(vec![(0.0, 2.0), (-1.0, 1.0)]).unwrap();
        assert_relative_eq!(bx.volume(), 4.0, epsilon = 1e-12);
        assert_relative_eq!(bx.subset_volume(&[1]).unwrap(), 2.0, epsilon = 1e-12);
        assert_eq!(bx.center(), DVector::from_vec(vec![1.0, 0.0]));

        let mut rng = rng_from_seed(1);
        for _ in 0..200 {
            assert!(b3.contains(&b3.sample(&mut rng)));
            assert!(bx.contains(&bx.sample(&mut rng)));
        }
        // Ball sampling is genuinely uniform: E‖x‖ = r·d/(d+1) for d=3.
        let mean_norm: f64 =
            (0..4000).map(|_| b3.sample(&mut rng).norm()).sum::<f64>() / 4000.0;
        assert!((mean_norm - 1.5).abs() < 0.05, "mean norm {mean_norm}");

        assert!(Domain::ball(0, 1.0).is_err());
        assert!(Domain::ball(2, 0.0).is_err());
        assert!(Domain::from_bounds(vec![(1.0, 1.0)]).is_err());
        assert!(b3.bounds().is_err());
    }

    #[test]
    fn anchor_config_validates_membership() {
        let domain = Domain::unit_box(2).unwrap();
        assert!(AnchorConfig::new(DVector::from_vec(vec![0.5, 0.5]), &domain).is_ok());
        assert!(AnchorConfig::new(DVector::from_vec(vec![1.5, 0.5]), &domain).is_err());
        assert!(AnchorConfig::new(DVector::from_vec(vec![0.5]), &domain).is_err());
        let c = AnchorConfig::center(&domain);
        assert_eq!(c.point(), &DVector::from_vec(vec![0.5, 0.5]));
    }

    #[test]
    fn subset_validation_rejects_bad_input() {
        let f = product_fn();
        let cfg = AnchorConfig::center(f.domain());
        let x = DVector::from_vec(vec![0.3, 0.5]);
        assert!(anchored_term(&f, &[0, 0], &cfg, &x).is_err());
        assert!(anchored_term(&f, &[5], &cfg, &x).is_err());
        assert!(anchored_term(&f, &[0], &cfg, &DVector::zeros(3)).is_err());
        // Oracle needs derivatives.
        let bare = SampledFunction::new(Domain::unit_box(2).unwrap(), |x| x[0] * x[1]);
        let cfg2 = AnchorConfig::center(bare.domain());
        let q = QuadratureSpec::tensor_gauss(4);
        assert!(anchored_term_via_derivative(&bare, &[0], &cfg2, &x, &q).is_err());
        assert!(
            anchored_term_via_derivative(&product_fn(), &[0, 1], &cfg, &x, &q).is_ok()
        );
    }

    #[test]
    fn gauss_legendre_rule_is_exact_on_polynomials() {
        for n in [2usize, 5, 8, 16, 32] {
            let (nodes, weights) = gauss_legendre(n).unwrap();
            assert_relative_eq!(weights.iter().sum::<f64>(), 2.0, epsilon = 1e-13);
            // Exact for degree ≤ 2n−1: check x² and x⁴ when allowed.
            let m2: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x * x).sum();
            assert_relative_eq!(m2, 2.0 / 3.0, epsilon = 1e-12);
            if 2 * n - 1 >= 4 {
                let m4: f64 =
                    nodes.iter().zip(&weights).map(|(x, w)| w * x.powi(4)).sum();
                assert_relative_eq!(m4, 2.0 / 5.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn anova_norm_estimates_separate_zero_from_nonzero_terms() {
        let f = product_fn();
        let q = QuadratureSpec::monte_carlo(400, 6);
        let coupled =
            anova_term_norm(&f, &[0, 1], PNorm::Infinity, 50, &q, 1).unwrap();
        assert!(coupled > 0.1, "coupled {coupled}");
        // A function without the coupling: its pair term is exactly zero.
        let g = SampledFunction::new(Domain::symmetric_box(2, 1.0).unwrap(), |x| {
            x[0] + (2.0 * x[1]).sin()
        });
        let zero = anova_term_norm(&g, &[0, 1], PNorm::Infinity, 50, &q, 1).unwrap();
        assert!(zero < 1e-12, "zero {zero}");
    }

    #[test]
    fn function_sum_combines_derivatives() {
        let f = product_fn();
        let g = product_fn();
        let s = f.add(&g).unwrap();
        let x = DVector::from_vec(vec![0.2, -0.4]);
        assert_relative_eq!(s.eval(&x), 2.0 * f.eval(&x), epsilon = 1e-15);
        assert!((s.grad(&x).unwrap() - 2.0 * f.grad(&x).unwrap()).norm() < 1e-15);
        assert!((s.hess(&x).unwrap() - 2.0 * f.hess(&x).unwrap()).norm() < 1e-15);
    }
}
