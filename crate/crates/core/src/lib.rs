//! Laplace and heat problems on the half square `(0,1) x (-1,1)` with a
//! periodic, rapidly oscillating Neumann law on the face `x1 = 0`, their
//! homogenized (stick/slip) limit, cell problems, and viscosity-solution
//! audits.

pub mod boundary;
pub mod corrector;
pub mod epsilon_solver;
pub mod grid;
pub mod homogenized_solver;
pub mod media;
mod scheme;
pub mod viscosity_audit;

pub use boundary::DirichletData;
pub use grid::{build_half_grid, Field, HalfGrid, NodeKind};
pub use media::{PeriodicProfile, ProfileKind};
pub use scheme::solve_neumann_laplace;
