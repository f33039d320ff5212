//! Exhaustive loss evaluation over a lattice in angle space.
//!
//! The lattice puts `ceil(2*pi/h)` equispaced values on every full-circle
//! angle and `ceil(pi/h)` on every half-circle angle, so its cardinality is
//!
//! ```text
//! ceil(2*pi/h)^(d-1) * ceil(pi/h)^((d-1)(d-2)/2)
//! ```
//!
//! Any rotation is within Frobenius distance `d(d-1)h` of some lattice
//! point (snap every angle down to the lattice; each plane rotation is
//! sqrt(2)-Lipschitz in its angle).
//!
//! Enumeration is lexicographic in the flat angle vector. All but the last
//! angle define a *prefix*: the prefix rotation is applied to the matrix set
//! once, and the final angle — whose plane rotation touches only the last
//! two rows and columns of the conjugated matrices — is swept incrementally
//! in O(d) per matrix per lattice point instead of O(d^3).

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::SymmetricMatrixSet;

use super::loss::{half_power_loss, sparsity_loss, LossConfig};
use super::rotations::{angles_to_rotation, apply_jacobi_right, AngleLayout};

/// Loss ranking the lattice points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridSelector {
    /// [`half_power_loss`]: the default, a steep proxy for the entry count.
    HalfPower,
    /// [`sparsity_loss`] with the supplied configuration.
    Smoothed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    /// Lattice spacing.
    pub h: f64,
    /// Approximate number of lattice points handed to one worker at a time.
    pub block_size: usize,
    pub selector: GridSelector,
    /// Refuse lattices larger than this many points.
    pub max_points: u128,
}

impl GridConfig {
    pub const DEFAULT_MAX_POINTS: u128 = 1 << 28;

    pub fn new(h: f64) -> Self {
        Self {
            h,
            block_size: 8192,
            selector: GridSelector::HalfPower,
            max_points: Self::DEFAULT_MAX_POINTS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub u: DMatrix<f64>,
    /// Flat angle vector of the best lattice point.
    pub angles: Vec<f64>,
    /// Selector loss at the best point (re-evaluated directly).
    pub loss: f64,
    pub points_evaluated: u128,
}

fn slot_count(layout: &AngleLayout, flat: usize, h: f64) -> u64 {
    (layout.range_upper(flat) / h).ceil() as u64
}

/// Number of lattice points for dimension `d` and spacing `h`.
pub fn grid_cardinality(d: usize, h: f64) -> Result<u128> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lattice spacing must be positive, got {h}"
        )));
    }
    let layout = AngleLayout::new(d)?;
    let mut total: u128 = 1;
    for i in 0..layout.len() {
        total = total
            .checked_mul(slot_count(&layout, i, h) as u128)
            .ok_or_else(|| Error::TooLarge {
                context: "lattice cardinality".into(),
                got: usize::MAX,
                limit: usize::MAX,
            })?;
    }
    Ok(total)
}

/// Snap a flat angle vector down to the lattice (each slot clamped to its
/// range). The snapped rotation is within `d(d-1)h` of the original in
/// Frobenius norm.
pub fn snap_angles_to_grid(d: usize, h: f64, angles: &[f64]) -> Result<Vec<f64>> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lattice spacing must be positive, got {h}"
        )));
    }
    let layout = AngleLayout::new(d)?;
    if angles.len() != layout.len() {
        return Err(Error::DimensionMismatch {
            context: "flat angle vector".into(),
            expected: layout.len(),
            got: angles.len(),
        });
    }
    Ok(angles
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let k = (a / h).floor().max(0.0) as u64;
            let k = k.min(slot_count(&layout, i, h) - 1);
            k as f64 * h
        })
        .collect())
}

/// Scratch buffers reused across lattice points by one worker.
struct Scratch {
    digits: Vec<u64>,
    u_prefix: DMatrix<f64>,
    conj: Vec<DMatrix<f64>>,
    agg0: Vec<f64>,
    agg1: Vec<f64>,
}

impl Scratch {
    fn new(d: usize, n_mats: usize, n_prefix_digits: usize) -> Self {
        Self {
            digits: vec![0; n_prefix_digits],
            u_prefix: DMatrix::identity(d, d),
            conj: vec![DMatrix::zeros(d, d); n_mats],
            agg0: vec![0.0; d],
            agg1: vec![0.0; d],
        }
    }
}

/// Minimize the selector loss over the lattice.
///
/// Deterministic regardless of thread count; exact ties are broken towards
/// the lexicographically first angle vector. The returned loss is the
/// selector loss re-evaluated at the winning rotation.
pub fn grid_search(
    mats: &SymmetricMatrixSet,
    cfg: &GridConfig,
    loss_cfg: &LossConfig,
) -> Result<GridSearchResult> {
    let d = mats.dim();
    let total = grid_cardinality(d, cfg.h)?;
    if total > cfg.max_points {
        return Err(Error::GridBudgetExceeded {
            d,
            h: cfg.h,
            cardinality: total,
            cap: cfg.max_points,
        });
    }
    let layout = AngleLayout::new(d)?;
    let l = layout.len();
    if l == 0 {
        let u = DMatrix::identity(d, d);
        let loss = direct_loss(mats, &u, cfg, loss_cfg);
        return Ok(GridSearchResult {
            u,
            angles: vec![],
            loss,
            points_evaluated: 1,
        });
    }

    let counts: Vec<u64> = (0..l).map(|i| slot_count(&layout, i, cfg.h)).collect();
    let n_last = counts[l - 1];
    let prefix_total = (total / n_last as u128) as usize;
    let min_len = (cfg.block_size.max(1) as u64 / n_last).max(1) as usize;

    let identity = (f64::INFINITY, u128::MAX);
    let pick = |a: (f64, u128), b: (f64, u128)| {
        if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
            b
        } else {
            a
        }
    };

    let (best_loss, best_idx) = (0..prefix_total)
        .into_par_iter()
        .with_min_len(min_len)
        .fold(
            || (Scratch::new(d, mats.len(), l.saturating_sub(1)), identity),
            |(mut scratch, best), p| {
                let local = eval_prefix(mats, cfg, loss_cfg, &counts, p as u64, &mut scratch);
                (scratch, pick(best, local))
            },
        )
        .map(|(_, best)| best)
        .reduce(|| identity, pick);

    if best_idx == u128::MAX {
        return Err(Error::OptimizationFailed(
            "lattice search evaluated no points".into(),
        ));
    }

    // Decode the winning flat index into angles.
    let mut angles = vec![0.0; l];
    let mut rem = best_idx;
    for i in (0..l).rev() {
        let c = counts[i] as u128;
        angles[i] = (rem % c) as f64 * cfg.h;
        rem /= c;
    }
    let u = angles_to_rotation(d, &angles)?;
    let loss = direct_loss(mats, &u, cfg, loss_cfg);
    // The quarter-power selector is only 1/4-Hölder near vanishing entries,
    // so two float paths may disagree by ~(1e-16)^(1/4) in absolute terms.
    debug_assert!(
        (loss - best_loss).abs() <= 1e-5 * best_loss.abs().max(1.0),
        "incremental loss {best_loss} disagrees with direct loss {loss}"
    );
    Ok(GridSearchResult {
        u,
        angles,
        loss,
        points_evaluated: total,
    })
}

fn direct_loss(
    mats: &SymmetricMatrixSet,
    u: &DMatrix<f64>,
    cfg: &GridConfig,
    loss_cfg: &LossConfig,
) -> f64 {
    match cfg.selector {
        GridSelector::HalfPower => half_power_loss(mats, u),
        GridSelector::Smoothed => sparsity_loss(mats, u, loss_cfg),
    }
}

/// Evaluate every lattice point sharing the prefix `p` (all angles fixed
/// except the last) and return the per-prefix best `(loss, flat index)`.
fn eval_prefix(
    mats: &SymmetricMatrixSet,
    cfg: &GridConfig,
    loss_cfg: &LossConfig,
    counts: &[u64],
    p: u64,
    scratch: &mut Scratch,
) -> (f64, u128) {
    let d = mats.dim();
    let n_mats = mats.len();
    let l = counts.len();
    let n_last = counts[l - 1];
    let layout = AngleLayout::new(d).expect("validated");

    // Decode prefix digits (most significant first).
    let mut rem = p;
    for i in (0..l - 1).rev() {
        scratch.digits[i] = rem % counts[i];
        rem /= counts[i];
    }

    // Prefix rotation: the full product with the final factor left out.
    // The final factor is the last angle both in product order and in the
    // flat layout, so skipping it keeps the product order intact.
    scratch.u_prefix.fill_with_identity();
    for r in 1..d {
        for j in 1..=r {
            if r == d - 1 && j == d - 1 {
                continue;
            }
            let flat = layout.flat_index(r, j);
            let alpha = scratch.digits[flat] as f64 * cfg.h;
            apply_jacobi_right(&mut scratch.u_prefix, d - 1 - r + j, alpha);
        }
    }

    // Conjugate the set by the prefix rotation, symmetrized.
    for (c, h) in scratch.conj.iter_mut().zip(mats.mats()) {
        let hu = h * &scratch.u_prefix;
        *c = scratch.u_prefix.tr_mul(&hu);
        let ct = c.transpose();
        *c += ct;
        *c *= 0.5;
    }

    // The final plane rotation touches rows/columns c0, c1 only.
    let c0 = d - 2;
    let c1 = d - 1;
    let (n_out, n_in) = loss_cfg.scalings(n_mats);

    // Pre-aggregate the loss contribution of entries untouched by the final
    // rotation.
    let mut core = 0.0;
    for i in 0..c0 {
        for j in 0..c0 {
            let q: f64 = scratch.conj.iter().map(|m| m[(i, j)] * m[(i, j)]).sum();
            core += match cfg.selector {
                GridSelector::HalfPower => q.powf(0.25),
                GridSelector::Smoothed => {
                    if i == j && !loss_cfg.include_diagonal {
                        0.0
                    } else {
                        (n_in * q + loss_cfg.epsilon).sqrt()
                    }
                }
            };
        }
    }

    let mut best = (f64::INFINITY, u128::MAX);
    for k in 0..n_last {
        let theta = k as f64 * cfg.h;
        let (s, c) = theta.sin_cos();

        scratch.agg0[..c0].fill(0.0);
        scratch.agg1[..c0].fill(0.0);
        let (mut agg00, mut agg01, mut agg11) = (0.0, 0.0, 0.0);
        for m in &scratch.conj {
            let col0 = m.column(c0);
            let col1 = m.column(c1);
            for i in 0..c0 {
                let x = col0[i];
                let y = col1[i];
                let v0 = c * x + s * y;
                let v1 = -s * x + c * y;
                scratch.agg0[i] += v0 * v0;
                scratch.agg1[i] += v1 * v1;
            }
            let m00 = m[(c0, c0)];
            let m01 = m[(c0, c1)];
            let m11 = m[(c1, c1)];
            let r00 = c * c * m00 + 2.0 * c * s * m01 + s * s * m11;
            let r11 = s * s * m00 - 2.0 * c * s * m01 + c * c * m11;
            let r01 = (c * c - s * s) * m01 + c * s * (m11 - m00);
            agg00 += r00 * r00;
            agg01 += r01 * r01;
            agg11 += r11 * r11;
        }

        let loss = match cfg.selector {
            GridSelector::HalfPower => {
                let mut sum = core;
                for i in 0..c0 {
                    sum += 2.0 * (scratch.agg0[i].powf(0.25) + scratch.agg1[i].powf(0.25));
                }
                sum += agg00.powf(0.25) + agg11.powf(0.25) + 2.0 * agg01.powf(0.25);
                sum * sum / (n_mats as f64).sqrt()
            }
            GridSelector::Smoothed => {
                let eps = loss_cfg.epsilon;
                let mut sum = core;
                for i in 0..c0 {
                    sum += 2.0
                        * ((n_in * scratch.agg0[i] + eps).sqrt()
                            + (n_in * scratch.agg1[i] + eps).sqrt());
                }
                sum += 2.0 * (n_in * agg01 + eps).sqrt();
                if loss_cfg.include_diagonal {
                    sum += (n_in * agg00 + eps).sqrt() + (n_in * agg11 + eps).sqrt();
                }
                n_out * sum
            }
        };

        let idx = p as u128 * n_last as u128 + k as u128;
        if loss < best.0 || (loss == best.0 && idx < best.1) {
            best = (loss, idx);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::haar_rotation;
    use crate::manifold::rotations::{angles_from_rotation, sample_angles};
    use crate::types::rng_from_seed;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    fn random_set(d: usize, n: usize, seed: u64) -> SymmetricMatrixSet {
        let mut rng = rng_from_seed(seed);
        SymmetricMatrixSet::new(
            (0..n)
                .map(|_| {
                    let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
                    (&a + a.transpose()) / 2.0
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cardinality_matches_the_closed_form() {
        // d=3, h=1: two full-circle slots of 7 points, one half-circle of 4.
        assert_eq!(grid_cardinality(3, 1.0).unwrap(), 196);
        assert_eq!(grid_cardinality(2, 1.0).unwrap(), 7);
        assert_eq!(
            grid_cardinality(4, 0.25).unwrap(),
            26u128.pow(3) * 13u128.pow(3)
        );
    }

    #[test]
    fn oversized_lattices_are_refused() {
        let mats = random_set(5, 2, 1);
        let cfg = GridConfig::new(0.5);
        let err = grid_search(&mats, &cfg, &LossConfig::default()).unwrap_err();
        match err {
            Error::GridBudgetExceeded { d, cardinality, cap, .. } => {
                assert_eq!(d, 5);
                assert!(cardinality > cap);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn incremental_search_matches_naive_enumeration() {
        let mats = random_set(3, 2, 2);
        let h = 0.7;
        for (selector, loss_cfg) in [
            (GridSelector::HalfPower, LossConfig::default()),
            (GridSelector::Smoothed, LossConfig::default()),
            (GridSelector::Smoothed, LossConfig::diagonal_inclusive()),
        ] {
            let cfg = GridConfig {
                selector,
                ..GridConfig::new(h)
            };
            let got = grid_search(&mats, &cfg, &loss_cfg).unwrap();

            // Naive: materialize every rotation.
            let layout = AngleLayout::new(3).unwrap();
            let counts: Vec<u64> = (0..layout.len())
                .map(|i| slot_count(&layout, i, h))
                .collect();
            let total: u64 = counts.iter().product();
            let mut best = (f64::INFINITY, u64::MAX);
            for idx in 0..total {
                let mut angles = vec![0.0; layout.len()];
                let mut rem = idx;
                for i in (0..layout.len()).rev() {
                    angles[i] = (rem % counts[i]) as f64 * h;
                    rem /= counts[i];
                }
                let u = angles_to_rotation(3, &angles).unwrap();
                let loss = match selector {
                    GridSelector::HalfPower => half_power_loss(&mats, &u),
                    GridSelector::Smoothed => sparsity_loss(&mats, &u, &loss_cfg),
                };
                if loss < best.0 {
                    best = (loss, idx);
                }
            }
            assert_eq!(got.points_evaluated, total as u128);
            let naive_angles: Vec<f64> = {
                let mut angles = vec![0.0; layout.len()];
                let mut rem = best.1;
                for i in (0..layout.len()).rev() {
                    angles[i] = (rem % counts[i]) as f64 * h;
                    rem /= counts[i];
                }
                angles
            };
            assert_eq!(got.angles, naive_angles, "selector {selector:?}");
            assert!((got.loss - best.0).abs() <= 1e-10 * best.0.max(1.0));
        }
    }

    #[test]
    fn grid_recovers_a_lattice_aligned_diagonalizer() {
        let d = 3;
        let h = 0.5;
        let planted = vec![2.0, 1.5, 1.0];
        let v = angles_to_rotation(d, &planted).unwrap();
        let mats = SymmetricMatrixSet::new(
            (1..=2)
                .map(|k| {
                    let diag = DVector::from_fn(d, |i, _| (i + k) as f64);
                    &v * DMatrix::from_diagonal(&diag) * v.transpose()
                })
                .collect(),
        )
        .unwrap();
        let cfg = GridConfig::new(h);
        let res = grid_search(&mats, &cfg, &LossConfig::default()).unwrap();
        assert_eq!(res.angles, planted);
        let conj = mats.conjugated(&res.u).unwrap();
        let off: f64 = conj
            .mats()
            .iter()
            .map(|m| {
                let mut s = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        if i != j {
                            s += m[(i, j)] * m[(i, j)];
                        }
                    }
                }
                s
            })
            .sum();
        assert!(off < 1e-20, "off-diagonal energy {off}");
    }

    #[test]
    fn planar_search_localizes_the_diagonalizer_angle() {
        // Single 2x2 matrix rotated by a known angle: the best lattice angle
        // must be within h of a diagonalizer, modulo the pi/2 symmetry of
        // the 2x2 problem (column swaps and sign flips).
        let theta_star = 0.83;
        let v = angles_to_rotation(2, &[theta_star]).unwrap();
        let h = 0.01;
        let mats = SymmetricMatrixSet::new(vec![
            &v * DMatrix::from_diagonal(&nalgebra::dvector![2.0, -1.0]) * v.transpose(),
        ])
        .unwrap();
        let cfg = GridConfig {
            max_points: 1 << 12,
            ..GridConfig::new(h)
        };
        let res = grid_search(&mats, &cfg, &LossConfig::default()).unwrap();
        let got = res.angles[0];
        let quarter = std::f64::consts::FRAC_PI_2;
        let offset = (got - theta_star).rem_euclid(quarter);
        let dist = offset.min(quarter - offset);
        assert!(dist <= h, "angle {got} is {dist} from a diagonalizer");
    }

    #[test]
    fn one_dimensional_search_returns_identity() {
        let mats = SymmetricMatrixSet::new(vec![DMatrix::from_element(1, 1, 2.0)]).unwrap();
        let res = grid_search(&mats, &GridConfig::new(0.5), &LossConfig::default()).unwrap();
        assert_eq!(res.u, DMatrix::identity(1, 1));
        assert_eq!(res.points_evaluated, 1);
    }

    #[test]
    fn snapping_respects_the_covering_bound() {
        let d = 3;
        let h = 0.5;
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let v = haar_rotation(d, &mut rng);
            let angles = angles_from_rotation(&v).unwrap();
            let snapped = snap_angles_to_grid(d, h, &angles).unwrap();
            let u = angles_to_rotation(d, &snapped).unwrap();
            let dist = (&u - &v).norm();
            let bound = (d * (d - 1)) as f64 * h;
            assert!(dist <= bound, "distance {dist} exceeds bound {bound}");
            for (i, &a) in snapped.iter().enumerate() {
                assert!(a >= 0.0);
                assert!(a < AngleLayout::new(d).unwrap().range_upper(i));
                assert!((a / h - (a / h).round()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn snapped_random_angle_vectors_stay_on_the_lattice() {
        let mut rng = rng_from_seed(4);
        for d in 2..=5 {
            let angles = sample_angles(d, &mut rng);
            for h in [1.0, 0.5, 0.25] {
                let snapped = snap_angles_to_grid(d, h, &angles).unwrap();
                for (&orig, &snap) in angles.iter().zip(&snapped) {
                    assert!(snap <= orig && orig - snap < h);
                }
            }
        }
    }

    #[test]
    fn results_are_identical_across_thread_counts() {
        let mats = random_set(3, 3, 5);
        let cfg = GridConfig {
            block_size: 1,
            ..GridConfig::new(0.9)
        };
        let res_parallel = grid_search(&mats, &cfg, &LossConfig::default()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let res_serial =
            pool.install(|| grid_search(&mats, &cfg, &LossConfig::default()).unwrap());
        assert_eq!(res_parallel.angles, res_serial.angles);
        assert_eq!(res_parallel.loss, res_serial.loss);
    }
}
