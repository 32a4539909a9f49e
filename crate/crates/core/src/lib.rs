//! Numerical workbench for periodic homogenization of viscous
//! Hamilton–Jacobi equations
//!
//! ```text
//! u_t - ε tr(A(x/ε) D²u) + H(Du, x/ε) = 0,   u(x, 0) = g(x).
//! ```
//!
//! The crate solves the periodic cell problems that define the effective
//! Hamiltonian `H̄`, tabulates `H̄` and `D_pH̄`, solves the effective equation by
//! characteristics, builds the interior corrector hierarchy `w_1..w_m`,
//! evaluates the two-scale expansion and its residual, and compares against a
//! direct fine-grid solve of the ε-problem in 1D.

pub mod cell;
pub mod correctors;
pub mod effective;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod problem;
pub mod reference;
pub mod stencil;
pub mod table;
pub mod torus;
pub mod trig;

pub use error::{Error, Result};
pub use geometry::{BoxRegion, Mat, Vect};
