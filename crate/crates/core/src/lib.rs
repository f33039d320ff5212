//! Discovery of orthogonal changes of variables under which a sampled smooth
//! function becomes sparsely additively decomposable.
//!
//! The library implements a three-stage recovery pipeline — active-subspace
//! reduction from gradient samples, error-controlled joint block
//! diagonalization of Hessian samples, and smoothed sparsity minimization
//! over the rotation group — together with the anchored/ANOVA decomposition
//! machinery used to certify and report the recovered structure, synthetic
//! instance generators, and a batch CLI.

pub mod block_diag;
pub mod cli;
pub mod decomposition;
pub mod error;
pub mod graphs;
pub mod instance;
pub mod linalg;
pub mod manifold;
pub mod pipeline;
pub mod testgen;
pub mod types;
pub mod vertex_min;

pub use error::{Error, Result};
pub use types::{OrthogonalTransform, SymmetricMatrixSet};
