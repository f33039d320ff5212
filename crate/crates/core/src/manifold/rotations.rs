//! Jacobi (Givens) rotations and the angle parametrization of SO(d).
//!
//! A rotation is written as an ordered product of plane rotations
//!
//! ```text
//! U(alpha) = prod_{r=1}^{d-1} prod_{j=1}^{r} R(d-1-r+j, alpha[r][j])
//! ```
//!
//! where `R(k, a)` rotates the plane spanned by axes `k` and `k+1`
//! (1-based). Group `r` sweeps axes `d-r, ..., d-1` in ascending order. The
//! map is onto SO(d) when the leading angle of each group ranges over
//! `[0, 2*pi)` and the remaining angles over `[0, pi)`.
//!
//! Angles are stored flat: the first `d-1` entries are the leading angles
//! `alpha[r][1]` for `r = 1..d-1`, followed by the remaining angles ordered
//! lexicographically by `(r, j)` with `r >= 2`, `j >= 2`.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};

/// Number of angles parametrizing SO(d).
pub fn angle_count(d: usize) -> usize {
    d * (d - 1) / 2
}

/// Indexing helper between flat angle vectors and `(group, position)` pairs.
///
/// Groups and positions are 1-based to match the product formula; the flat
/// index is 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AngleLayout {
    d: usize,
}

impl AngleLayout {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::EmptyInput("angle layout for dimension 0".into()));
        }
        Ok(Self { d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        angle_count(self.d)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of angle `alpha[r][j]`, `1 <= j <= r <= d-1`.
    pub fn flat_index(&self, r: usize, j: usize) -> usize {
        debug_assert!(r >= 1 && r <= self.d - 1 && j >= 1 && j <= r);
        if j == 1 {
            r - 1
        } else {
            (self.d - 1) + (r - 1) * (r - 2) / 2 + (j - 2)
        }
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn group_of(&self, flat: usize) -> (usize, usize) {
        debug_assert!(flat < self.len());
        if flat < self.d - 1 {
            (flat + 1, 1)
        } else {
            let mut rest = flat - (self.d - 1);
            let mut r = 2;
            while rest >= r - 1 {
                rest -= r - 1;
                r += 1;
            }
            (r, rest + 2)
        }
    }

    /// Whether the angle at `flat` ranges over the full circle `[0, 2*pi)`
    /// (leading angle of its group) rather than the half circle `[0, pi)`.
    pub fn is_full_circle(&self, flat: usize) -> bool {
        flat < self.d - 1
    }

    /// Upper end of the angle range at `flat`.
    pub fn range_upper(&self, flat: usize) -> f64 {
        if self.is_full_circle(flat) {
            std::f64::consts::TAU
        } else {
            std::f64::consts::PI
        }
    }
}

/// The plane rotation `R(r, alpha)` acting on axes `r` and `r+1` (1-based):
/// the identity except for the 2x2 block `[[cos, -sin], [sin, cos]]`.
pub fn jacobi_rotation(d: usize, r: usize, alpha: f64) -> Result<DMatrix<f64>> {
    if r == 0 || r >= d {
        return Err(Error::InvalidArgument(format!(
            "plane rotation axis must satisfy 1 <= r <= d-1, got r={r}, d={d}"
        )));
    }
    let mut m = DMatrix::identity(d, d);
    let (c, s) = (alpha.cos(), alpha.sin());
    let k = r - 1;
    m[(k, k)] = c;
    m[(k, k + 1)] = -s;
    m[(k + 1, k)] = s;
    m[(k + 1, k + 1)] = c;
    Ok(m)
}

/// In-place right multiplication `A <- A * R(r, alpha)`, touching only
/// columns `r-1` and `r` (0-based). Costs `4d` multiplications.
pub fn apply_jacobi_right(a: &mut DMatrix<f64>, r: usize, alpha: f64) {
    let (c, s) = (alpha.cos(), alpha.sin());
    let k = r - 1;
    for i in 0..a.nrows() {
        let x = a[(i, k)];
        let y = a[(i, k + 1)];
        a[(i, k)] = c * x + s * y;
        a[(i, k + 1)] = -s * x + c * y;
    }
}

/// Evaluate the rotation `U(angles)` for a flat angle vector.
pub fn angles_to_rotation(d: usize, angles: &[f64]) -> Result<DMatrix<f64>> {
    let layout = AngleLayout::new(d)?;
    if angles.len() != layout.len() {
        return Err(Error::DimensionMismatch {
            context: "flat angle vector".into(),
            expected: layout.len(),
            got: angles.len(),
        });
    }
    let mut u = DMatrix::identity(d, d);
    for r in 1..d {
        for j in 1..=r {
            let axis = d - 1 - r + j;
            apply_jacobi_right(&mut u, axis, angles[layout.flat_index(r, j)]);
        }
    }
    Ok(u)
}

/// Draw a uniformly distributed flat angle vector (each slot uniform on its
/// range). Note this is *not* the Haar measure on SO(d); it is used for
/// optimizer restarts where any full-support distribution works.
pub fn sample_angles<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    let layout = AngleLayout::new(d).expect("d >= 1");
    (0..layout.len())
        .map(|i| rng.gen_range(0.0..layout.range_upper(i)))
        .collect()
}

/// Recover a flat angle vector with `U(angles) == v` for a special
/// orthogonal `v`.
///
/// Leading group angles land in `[0, 2*pi)`; the rest in `[0, pi]` (the
/// closed upper end can be attained on a measure-zero set of inputs).
/// Reflections (`det v = -1`) are rejected.
pub fn angles_from_rotation(v: &DMatrix<f64>) -> Result<Vec<f64>> {
    let d = v.nrows();
    if d == 0 {
        return Err(Error::EmptyInput("angle extraction from 0x0 matrix".into()));
    }
    if v.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "angle extraction input".into(),
            expected: d,
            got: v.ncols(),
        });
    }
    let defect = crate::linalg::orthogonality_defect(v);
    if defect > 1e-8 {
        return Err(Error::InvalidArgument(format!(
            "angle extraction requires an orthogonal matrix (defect {defect:.2e})"
        )));
    }
    if v.determinant() < 0.0 {
        return Err(Error::InvalidArgument(
            "angle extraction requires det = +1; got a reflection".into(),
        ));
    }

    let layout = AngleLayout::new(d)?;
    let mut angles = vec![0.0; layout.len()];
    let mut w = v.clone();

    // Peel groups from the outside in: the first row of the active trailing
    // block determines the group acting on that block.
    for m in (2..=d).rev() {
        let off = d - m; // active block occupies rows/cols off..d
        let u: Vec<f64> = (0..m).map(|k| w[(off, off + k)]).collect();
        let betas = group_angles_from_first_row(&u);
        let r = m - 1;
        for (j, &beta) in betas.iter().enumerate() {
            angles[layout.flat_index(r, j + 1)] = beta;
        }
        // w <- w * G^T where G = R(a_1, b_1) ... R(a_r, b_r), a_j = off + j.
        for j in (0..r).rev() {
            apply_jacobi_right(&mut w, off + j + 1, -betas[j]);
        }
    }
    Ok(angles)
}

/// Solve the first-row pattern of one group: find `beta` with
///
/// ```text
/// u_1 = cos b_1
/// u_k = (-1)^(k-1) sin b_1 ... sin b_(k-1) cos b_k      (1 < k < m)
/// u_m = (-1)^(m-1) sin b_1 ... sin b_(m-1)
/// ```
///
/// for a unit vector `u`, with `b_1` on the full circle and `b_k in [0, pi]`
/// for `k >= 2` (so `sin b_k >= 0` there).
fn group_angles_from_first_row(u: &[f64]) -> Vec<f64> {
    let m = u.len();
    debug_assert!(m >= 2);
    let mut betas = vec![0.0; m - 1];

    let c1 = u[0].clamp(-1.0, 1.0);
    let t = (1.0 - c1 * c1).max(0.0).sqrt();
    // Sign of sin b_1 from the last component: sign(u_m) = (-1)^(m-1) sign(s_1)
    // when no interior sine vanishes; if u_m = 0 either choice reproduces u.
    let oriented_tail = if (m - 1) % 2 == 0 { u[m - 1] } else { -u[m - 1] };
    let s1 = if oriented_tail < 0.0 { -t } else { t };
    let mut b1 = s1.atan2(c1);
    if b1 < 0.0 {
        b1 += std::f64::consts::TAU;
    }
    betas[0] = b1;

    // q_k is the coefficient multiplying cos b_k in u_k.
    let mut q = -s1;
    for k in 2..m {
        let ck = if q.abs() > 0.0 {
            (u[k - 1] / q).clamp(-1.0, 1.0)
        } else {
            1.0
        };
        let bk = ck.acos();
        betas[k - 1] = bk;
        q *= -bk.sin();
    }
    betas
}
