//! Minimization of sparsity-promoting losses over the rotation group.
//!
//! The search space is SO(d). Candidate rotations conjugate a set of
//! symmetric matrices, and the loss measures how far the conjugated set is
//! from being jointly sparse. Three complementary minimizers are provided:
//!
//! * [`rgd_minimize`] — Riemannian gradient descent with a QR retraction and
//!   optional Armijo backtracking,
//! * [`landing_minimize`] — an unconstrained flow that adds an orthogonality
//!   penalty instead of retracting,
//! * [`grid_search`] — exhaustive evaluation over a lattice in the angle
//!   parametrization of SO(d), used both for global initialization in low
//!   dimension and as a certification fallback.

mod grid;
mod loss;
mod optim;
mod rotations;

pub use grid::{
    grid_cardinality, grid_search, snap_angles_to_grid, GridConfig, GridSearchResult, GridSelector,
};
pub use loss::{
    entrywise_square_sum, euclidean_gradient, half_power_loss, sparsity_loss, LossConfig,
    Normalization,
};
pub use optim::{
    landing_minimize, qr_retraction, random_init, rgd_minimize, riemannian_gradient,
    sufficient_optimality_check, IterationStat, OptimalityCertificate, OptimizerConfig,
    OptimizerMethod, Termination, Trajectory,
};
pub use rotations::{
    angle_count, angles_from_rotation, angles_to_rotation, apply_jacobi_right, jacobi_rotation,
    sample_angles, AngleLayout,
};
