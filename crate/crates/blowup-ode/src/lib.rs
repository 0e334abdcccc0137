//! Numerical integration of blow-up Cauchy problems for nonlinear ODEs.
//!
//! Solutions of blow-up problems tend to infinity at a finite point `x_*`
//! that is not known in advance, which defeats standard fixed-step
//! integrators. This crate transforms such problems — via differential
//! variables, non-local variables `xi = ∫ g dx`, or differential
//! constraints — into singularity-free parametric systems that plain
//! fixed-step Runge–Kutta handles, then recovers `x_*` from the tail of the
//! parametric solution.
//!
//! The pieces:
//! - [`expr`]: expression parser with exact forward-mode partial derivatives;
//! - [`problems`]: Cauchy-problem model plus a registry of test problems with
//!   exact solutions (the oracle layer);
//! - [`stepper`]: fixed-step Euler/midpoint/RK4 over vector states;
//! - [`transforms`]: the transformation menu (hodograph, arc-length,
//!   exp-type, differential constraints, growth-component for systems);
//! - [`estimates`]: blow-up criteria, one- and two-sided brackets for `x_*`,
//!   dominant-balance exponents, and the 1/beta control diagnostic;
//! - [`driver`]: end-to-end solves with the Lambda_m stopping rule and tail
//!   extrapolation of `x_*`;
//! - [`bench`]: stepsize calibration harness comparing the transformations.
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod bench;
pub mod driver;
pub mod estimates;
pub mod expr;
pub(crate) mod interp;
pub mod problems;
pub mod stepper;
pub mod transforms;

pub use expr::{Expr, Params};
pub use problems::{Kind, Problem, Registry};
pub use stepper::{HaltReason, Method, Trajectory, VectorField};
pub use transforms::{ParametricSolution, TransformSpec, TransformedProblem};
