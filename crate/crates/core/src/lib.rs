//! Continuous normalizing flows on Grassmann manifolds.
//!
//! The crate provides the pieces needed to learn and evaluate densities on
//! Gr(k,D), the manifold of k-dimensional subspaces of R^D, realized through
//! orthonormal representatives on the Stiefel manifold St(k,D):
//!
//! - [`tape`]: minimal reverse-mode autodiff over dense f64 matrices;
//! - [`geometry`]: Stiefel/Grassmann kernels (projections, the Cayley-transform
//!   horizontal retraction and its inverse, chart Jacobians, Gram-Schmidt);
//! - [`prior`]: a samplable Gaussian-based prior with exact log-density;
//! - [`field`]: the learnable O(k)-equivariant vector field;
//! - [`flow`]: chart-based ODE integration with divergence accumulation,
//!   flow maps, and exact log-likelihood;
//! - [`data`]: toy texture datasets on Gr(1,3) and CSV ingestion;
//! - [`train`]: maximum-likelihood training with Adam and checkpointing;
//! - [`stats`]: small statistical helpers used by diagnostics and tests.

pub mod data;
pub mod error;
pub mod field;
pub mod flow;
pub mod geometry;
pub mod prior;
pub mod stats;
pub mod tape;
pub mod train;
