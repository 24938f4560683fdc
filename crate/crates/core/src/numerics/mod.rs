//! Dense linear algebra: symmetric eigensolvers, LU solves and Stiefel
//! manifold optimisation.

pub mod dense;
pub mod eigen;
pub mod stiefel;

pub use dense::{solve_dense, solve_dense_with, Lu};
pub use eigen::{top_eigenpairs, top_eigenpairs_with, EigenMethod, EigenResult};
pub use stiefel::{orthogonality_loss, orthonormalize, CayleyAdamConfig, CayleyAdamState};
