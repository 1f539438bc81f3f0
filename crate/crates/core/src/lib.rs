//! Projection time-stepping for mechanical systems subject to one smooth
//! unilateral constraint `phi(u) >= 0` and a Newton restitution impact law.
//!
//! The crate is organised as:
//!
//! * [`geometry`]: constraint sets, the position-dependent mass metric,
//!   Riemannian projections and the impact map.
//! * [`scheme`]: the implicit projection time stepper and the scalar
//!   velocity-bound recurrence.
//! * [`oracle`]: event-driven reference integrator and closed-form bouncing ball.
//! * [`analysis`]: impact detection, energy and variation diagnostics,
//!   h-refinement studies.
//! * [`models`]: named benchmark problems.
//! * [`io`]: CSV schemas for trajectories, impacts and convergence tables.

pub mod analysis;
pub mod geometry;
pub mod io;
pub mod models;
pub mod oracle;
pub mod scheme;

pub use nalgebra::{DMatrix, DVector};

/// Column vector used for positions, tangent vectors and covectors alike.
pub type Vector = DVector<f64>;
/// Dense square matrix (mass matrices, Hessians, Jacobians).
pub type Matrix = DMatrix<f64>;
