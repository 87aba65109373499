//! Triangulated spatial domain and the sparse precisions built on it.

mod fem;
mod matern;
mod mesh;
mod precision;
mod projector;

pub use fem::{fem_matrices, FemMatrices};
pub use matern::{bessel_k1, matern_correlation, MaternParams};
pub use mesh::{build_mesh, convex_hull, convex_signed_distance, Mesh, MeshParams};
pub use precision::{
    ar1_log_det, ar1_precision, ar1_terms, ar1_weights, check_rho, matern_terms, matern_weights,
    spacetime_precision, spatial_precision, tau_from_sigma,
};
pub use projector::{build_projector, spatial_weights, temporal_weights, KnotGrid, Projector};
