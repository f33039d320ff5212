//! Stage 1 of the recovery pipeline: orthogonal reduction to the active
//! subspace.
//!
//! Stacking sampled gradients as columns of B, a left singular matrix of B
//! minimizes the number of coordinates the rotated function depends on:
//! columns past the numerical rank span directions in which every sampled
//! gradient vanishes. The Hessian samples are then compressed to the
//! leading d₁×d₁ block for the later stages.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decomposition::SampledFunction;
use crate::error::{Error, Result};
use crate::linalg::complete_orthonormal_basis;
use crate::types::{rng_from_seed, OrthogonalTransform, SymmetricMatrixSet};

/// Default relative singular-value threshold for noise-free gradients.
pub const DEFAULT_TAU_CLEAN: f64 = 1e-8;

/// Default gradient sample count per dimension (N = 100·d).
pub const SAMPLES_PER_DIM: usize = 100;

/// Relative threshold recommended for noisy gradients: 1e−3·√d.
pub fn noisy_tau(d: usize) -> f64 {
    1e-3 * (d as f64).sqrt()
}

/// Gradient observations: B is d×N with columns ∇f(x⁽ⁿ⁾), alongside the
/// sample locations.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    b: DMatrix<f64>,
    points: Vec<DVector<f64>>,
}

impl GradientSample {
    pub fn new(b: DMatrix<f64>, points: Vec<DVector<f64>>) -> Result<Self> {
        if b.ncols() == 0 {
            return Err(Error::EmptyInput("gradient sample with 0 columns".into()));
        }
        if points.len() != b.ncols() {
            return Err(Error::DimensionMismatch {
                context: "gradient sample points vs columns".into(),
                expected: b.ncols(),
                got: points.len(),
            });
        }
        if points.iter().any(|p| p.len() != b.nrows()) {
            return Err(Error::InvalidArgument(
                "gradient sample points must have the matrix row dimension".into(),
            ));
        }
        if b.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("gradient sample matrix".into()));
        }
        Ok(Self { b, points })
    }

    /// Sample `n` uniform domain points and stack the analytic gradients.
    pub fn from_function(f: &SampledFunction, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput("gradient sample with 0 points".into()));
        }
        let mut rng = rng_from_seed(seed);
        let mut points = Vec::with_capacity(n);
        let mut b = DMatrix::zeros(f.d(), n);
        for k in 0..n {
            let x = f.domain().sample(&mut rng);
            b.set_column(k, &f.grad(&x)?);
            points.push(x);
        }
        Self::new(b, points)
    }

    pub fn d(&self) -> usize {
        self.b.nrows()
    }

    pub fn n(&self) -> usize {
        self.b.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }
}

/// JSON form of [`GradientSample`].
#[derive(Serialize, Deserialize)]
struct GradientSampleJson {
    d: usize,
    #[serde(rename = "N")]
    n: usize,
    /// One inner vector per sample, each of length d.
    columns: Vec<Vec<f64>>,
    points: Vec<Vec<f64>>,
}

impl Serialize for GradientSample {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GradientSampleJson {
            d: self.d(),
            n: self.n(),
            columns: (0..self.n())
                .map(|k| self.b.column(k).iter().copied().collect())
                .collect(),
            points: self.points.iter().map(|p| p.iter().copied().collect()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GradientSample {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = GradientSampleJson::deserialize(de)?;
        if raw.columns.len() != raw.n {
            return Err(serde::de::Error::custom(format!(
                "N={} but {} columns",
                raw.n,
                raw.columns.len()
            )));
        }
        if raw.columns.iter().any(|c| c.len() != raw.d) {
            return Err(serde::de::Error::custom("column length differs from d"));
        }
        let mut b = DMatrix::zeros(raw.d, raw.n);
        for (k, col) in raw.columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                b[(i, k)] = v;
            }
        }
        let points = raw
            .points
            .into_iter()
            .map(DVector::from_vec)
            .collect();
        GradientSample::new(b, points).map_err(serde::de::Error::custom)
    }
}

/// Result of the vertex-count minimization: an orthogonal U_V whose first
/// d₁ columns span the numerical gradient span, the singular values, and
/// the absolute threshold that produced d₁.
#[derive(Debug, Clone)]
pub struct VertexReduction {
    pub u_v: OrthogonalTransform,
    pub d1: usize,
    pub singular_values: Vec<f64>,
    pub tau_abs: f64,
}

/// Compute the active-subspace rotation by SVD of the gradient matrix.
/// `tau_rel` is relative: the rank cut is at τ_abs = tau_rel · σ_max.
/// When N < d the thin U is completed to a full orthonormal basis.
pub fn vertex_minimize(g: &GradientSample, tau_rel: f64) -> Result<VertexReduction> {
    if !(tau_rel >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "relative threshold must be nonnegative, got {tau_rel}"
        )));
    }
    let d = g.d();
    let svd = g.b.clone().svd(true, false);
    let u_thin = svd.u.as_ref().expect("left vectors requested");
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("singular values are finite"));
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let tau_abs = tau_rel * sigma_max;
    let d1 = sv.iter().filter(|&&s| s > tau_abs && s > 0.0).count();
    let u_full = if u_thin.ncols() < d {
        complete_orthonormal_basis(u_thin)?
    } else {
        u_thin.clone()
    };
    Ok(VertexReduction {
        u_v: OrthogonalTransform::new(u_full)?,
        d1,
        singular_values: sv,
        tau_abs,
    })
}

/// Hessians compressed to the active subspace, with the largest discarded
/// border entry as a diagnostic. The border should be ≈ 0 when the
/// gradient span is exact; `border_warning` flags leakage above
/// 10·τ_abs (tolerated — noise leaks energy — but worth surfacing).
#[derive(Debug, Clone)]
pub struct ReducedHessians {
    pub set: SymmetricMatrixSet,
    pub border_residual: f64,
    pub border_warning: bool,
}

/// Conjugate the Hessian set by U_V and keep the top-left d₁×d₁ blocks.
pub fn reduce_hessians(h: &SymmetricMatrixSet, red: &VertexReduction) -> Result<ReducedHessians> {
    let d = red.u_v.dim();
    if h.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "hessian set for vertex reduction".into(),
            expected: d,
            got: h.dim(),
        });
    }
    if red.d1 == 0 {
        return Err(Error::EmptyInput(
            "vertex reduction found no active directions (all gradients below threshold)".into(),
        ));
    }
    let conj = h.conjugated(red.u_v.matrix())?;
    let mut border = 0.0f64;
    for m in conj.iter() {
        for i in 0..d {
            for j in 0..d {
                if i >= red.d1 || j >= red.d1 {
                    border = border.max(m[(i, j)].abs());
                }
            }
        }
    }
    let keep: Vec<usize> = (0..red.d1).collect();
    Ok(ReducedHessians {
        set: conj.principal_block(&keep)?,
        border_residual: border,
        border_warning: border > 10.0 * red.tau_abs.max(f64::EPSILON),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::Domain;
    use crate::linalg::haar_rotation;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn rank_one_gradients_give_a_single_active_direction() {
        let d = 4;
        let n = 10;
        let mut rng = rng_from_seed(1);
        let mut b = DMatrix::zeros(d, n);
        for k in 0..n {
            b[(0, k)] = rng.gen_range(-2.0..2.0);
        }
        let points = vec![DVector::zeros(d); n];
        let g = GradientSample::new(b, points).unwrap();
        let red = vertex_minimize(&g, DEFAULT_TAU_CLEAN).unwrap();
        assert_eq!(red.d1, 1);
        let first = red.u_v.matrix().column(0);
        assert_relative_eq!(first[0].abs(), 1.0, epsilon = 1e-12);
        assert!(first.iter().skip(1).all(|&v| v.abs() < 1e-12));
        // U stays orthogonal after completion.
        let u = red.u_v.matrix();
        assert!((u.transpose() * u - DMatrix::identity(d, d)).norm() < 1e-10);
    }

    #[test]
    fn ridge_function_along_a_diagonal_has_active_dimension_one() {
        // f(x) = sin(u₁ᵀx) with u₁ = (√2/2, √2/2): constant across the
        // orthogonal direction, so one active coordinate suffices.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let f = SampledFunction::new(Domain::symmetric_box(2, 1.0).unwrap(), move |x| {
            (s * (x[0] + x[1])).sin()
        })
        .with_grad(move |x| {
            let c = (s * (x[0] + x[1])).cos();
            DVector::from_vec(vec![s * c, s * c])
        });
        let g = GradientSample::from_function(&f, 50, 7).unwrap();
        let red = vertex_minimize(&g, DEFAULT_TAU_CLEAN).unwrap();
        assert_eq!(red.d1, 1);
        let dir = red.u_v.matrix().column(0);
        assert_relative_eq!(dir[0].abs(), s, epsilon = 1e-10);
        assert_relative_eq!(dir[1].abs(), s, epsilon = 1e-10);
    }

    #[test]
    fn planted_rank_is_recovered() {
        let d = 6;
        let n = 40;
        let k = 3;
        let mut rng = rng_from_seed(3);
        let q = haar_rotation(d, &mut rng);
        let mut b = DMatrix::zeros(d, n);
        for i in 0..k {
            let sigma = (i + 1) as f64;
            let v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0f64)).normalize();
            b += sigma * q.column(i) * v.transpose();
        }
        let g = GradientSample::new(b.clone(), vec![DVector::zeros(d); n]).unwrap();
        let red = vertex_minimize(&g, DEFAULT_TAU_CLEAN).unwrap();
        assert_eq!(red.d1, k);
        // Null rows: the trailing rows of U_VᵀB vanish.
        let ub = red.u_v.matrix().transpose() * &b;
        for j in k..d {
            assert!(ub.row(j).norm() <= red.tau_abs * 10.0 + 1e-12, "row {j}");
        }
        assert_eq!(red.singular_values.len(), d.min(n));
        assert!(red.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn fewer_samples_than_dimensions_still_yields_a_full_basis() {
        let d = 5;
        let mut rng = rng_from_seed(4);
        let b = DMatrix::from_fn(d, 2, |_, _| rng.gen_range(-1.0..1.0));
        let g = GradientSample::new(b, vec![DVector::zeros(d); 2]).unwrap();
        let red = vertex_minimize(&g, DEFAULT_TAU_CLEAN).unwrap();
        assert!(red.d1 <= 2);
        let u = red.u_v.matrix();
        assert_eq!(u.ncols(), d);
        assert!((u.transpose() * u - DMatrix::identity(d, d)).norm() < 1e-10);
    }

    #[test]
    fn identity_reduction_keeps_matrices() {
        let mut rng = rng_from_seed(5);
        let mats: Vec<DMatrix<f64>> = (0..3)
            .map(|_| {
                let m = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
                (&m + m.transpose()) * 0.5
            })
            .collect();
        let set = SymmetricMatrixSet::new(mats.clone()).unwrap();
        let red = VertexReduction {
            u_v: OrthogonalTransform::new(DMatrix::identity(3, 3)).unwrap(),
            d1: 3,
            singular_values: vec![1.0; 3],
            tau_abs: 0.0,
        };
        let out = reduce_hessians(&set, &red).unwrap();
        assert_eq!(out.border_residual, 0.0);
        for (a, b) in out.set.iter().zip(&mats) {
            assert!((a - b).amax() < 1e-15);
        }
    }

    #[test]
    fn inactive_coordinate_is_dropped_with_clean_border() {
        // Hessians of a function constant in x₂: diag(a_n, 0).
        let mats: Vec<DMatrix<f64>> = [1.5, -0.75, 2.25]
            .iter()
            .map(|&a| DMatrix::from_diagonal(&DVector::from_vec(vec![a, 0.0])))
            .collect();
        let set = SymmetricMatrixSet::new(mats).unwrap();
        let red = VertexReduction {
            u_v: OrthogonalTransform::new(DMatrix::identity(2, 2)).unwrap(),
            d1: 1,
            singular_values: vec![1.0, 0.0],
            tau_abs: 1e-8,
        };
        let out = reduce_hessians(&set, &red).unwrap();
        assert_eq!(out.set.dim(), 1);
        assert_eq!(out.border_residual, 0.0);
        assert!(!out.border_warning);
        let vals: Vec<f64> = out.set.iter().map(|m| m[(0, 0)]).collect();
        assert_eq!(vals, vec![1.5, -0.75, 2.25]);
    }

    #[test]
    fn hidden_low_rank_hessians_reduce_to_a_similar_set() {
        // H_n = Uᵀ diag(A_n, 0) U with B's columns in U's leading span:
        // the reduction must recover {A_n} up to orthogonal similarity.
        let d = 5;
        let k = 2;
        let n_mats = 4;
        let mut rng = rng_from_seed(6);
        let u = haar_rotation(d, &mut rng);
        let mut planted = Vec::new();
        let mut hidden = Vec::new();
        for _ in 0..n_mats {
            let a = DMatrix::from_fn(k, k, |_, _| rng.gen_range(-1.0..1.0f64));
            let a = (&a + a.transpose()) * 0.5;
            let mut big = DMatrix::zeros(d, d);
            big.view_mut((0, 0), (k, k)).copy_from(&a);
            hidden.push(u.transpose() * big * &u);
            planted.push(a);
        }
        let set = SymmetricMatrixSet::new(
            hidden.iter().map(|m| (m + m.transpose()) * 0.5).collect(),
        )
        .unwrap();
        // Gradients live in the span of U's first k rows' preimage.
        let mut b = DMatrix::zeros(d, 30);
        for c in 0..30 {
            let coeff0 = rng.gen_range(-1.0..1.0f64);
            let coeff1 = rng.gen_range(-1.0..1.0f64);
            let col = u.row(0).transpose() * coeff0 + u.row(1).transpose() * coeff1;
            b.set_column(c, &col);
        }
        let g = GradientSample::new(b, vec![DVector::zeros(d); 30]).unwrap();
        let red = vertex_minimize(&g, DEFAULT_TAU_CLEAN).unwrap();
        assert_eq!(red.d1, k);
        let out = reduce_hessians(&set, &red).unwrap();
        assert!(out.border_residual < 1e-10, "border {}", out.border_residual);
        for (r, a) in out.set.iter().zip(&planted) {
            let mut got = crate::linalg::symmetric_eigen(r).unwrap().eigenvalues;
            let mut want = crate::linalg::symmetric_eigen(a).unwrap().eigenvalues;
            got.sort_by(|x, y| x.partial_cmp(y).unwrap());
            want.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (g, w) in got.iter().zip(&want) {
                assert_relative_eq!(g, w, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn different_singular_bases_give_similar_reductions() {
        // Flipping column signs (and rotating within the null space) is
        // another valid reduction; per-matrix spectra must not change.
        let d = 4;
        let mut rng = rng_from_seed(8);
        let b = {
            let mut m = DMatrix::zeros(d, 20);
            for c in 0..20 {
                m[(0, c)] = rng.gen_range(-1.0..1.0);
                m[(1, c)] = rng.gen_range(-1.0..1.0);
                m[(2, c)] = rng.gen_range(-1.0..1.0);
            }
            m
        };
        let mats: Vec<DMatrix<f64>> = (0..3)
            .map(|_| {
                let m = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
                (&m + m.transpose()) * 0.5
            })
            .collect();
        let set = SymmetricMatrixSet::new(mats).unwrap();
        let g = GradientSample::new(b, vec![DVector::zeros(d); 20]).unwrap();
        let red = vertex_minimize(&g, DEFAULT_TAU_CLEAN).unwrap();
        assert_eq!(red.d1, 3);

        let mut alt_u = red.u_v.matrix().clone();
        for j in 0..d {
            if j % 2 == 0 {
                let col = -alt_u.column(j).clone_owned();
                alt_u.set_column(j, &col);
            }
        }
        let alt = VertexReduction {
            u_v: OrthogonalTransform::new(alt_u).unwrap(),
            d1: red.d1,
            singular_values: red.singular_values.clone(),
            tau_abs: red.tau_abs,
        };
        let a = reduce_hessians(&set, &red).unwrap();
        let b2 = reduce_hessians(&set, &alt).unwrap();
        for (ma, mb) in a.set.iter().zip(b2.set.iter()) {
            let mut ea = crate::linalg::symmetric_eigen(ma).unwrap().eigenvalues;
            let mut eb = crate::linalg::symmetric_eigen(mb).unwrap().eigenvalues;
            ea.sort_by(|x, y| x.partial_cmp(y).unwrap());
            eb.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (x, y) in ea.iter().zip(&eb) {
                assert_relative_eq!(x, y, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn gradient_samples_round_trip_through_json() {
        let f = SampledFunction::new(Domain::unit_box(3).unwrap(), |x| x[0] * x[1] + x[2])
            .with_grad(|x| DVector::from_vec(vec![x[1], x[0], 1.0]));
        let g = GradientSample::from_function(&f, 5, 2).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["d"], 3);
        assert_eq!(v["N"], 5);
        assert_eq!(v["columns"].as_array().unwrap().len(), 5);
        assert_eq!(v["points"].as_array().unwrap().len(), 5);
        let back: GradientSample = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(GradientSample::new(DMatrix::zeros(2, 0), vec![]).is_err());
        assert!(GradientSample::new(DMatrix::zeros(2, 3), vec![DVector::zeros(2); 2]).is_err());
        let g = GradientSample::new(DMatrix::zeros(2, 3), vec![DVector::zeros(2); 3]).unwrap();
        assert!(vertex_minimize(&g, -1.0).is_err());
        // All-zero gradients: no active directions, reduction refuses.
        let red = vertex_minimize(&g, DEFAULT_TAU_CLEAN).unwrap();
        assert_eq!(red.d1, 0);
        let set = SymmetricMatrixSet::new(vec![DMatrix::identity(2, 2)]).unwrap();
        assert!(reduce_hessians(&set, &red).is_err());
    }
}
