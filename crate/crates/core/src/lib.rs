//! Parameter estimation for ODE systems by multiple shooting.
//!
//! The time horizon is split into subintervals, each carrying its own initial
//! state `s_j`. Trajectory continuity across subinterval boundaries is imposed
//! through scalar equality constraints `h_j = ||x_j(t_{j+1}) - s_{j+1}||^2`,
//! whose gradients are assembled from a single backward adjoint sweep per
//! interval instead of forward variational systems. A weighted least-squares
//! objective over the discrete states is minimized subject to these
//! constraints by an equality-constrained SQP solver with a damped BFGS
//! Hessian and an l1-merit line search.
//!
//! Modules:
//! - [`ode`]: fixed-step RK4 integration, cubic Hermite dense output, and the
//!   backward adjoint sweep with quadrature accumulators.
//! - [`models`]: compiled-in ODE systems (Lotka-Volterra benchmark, scalar
//!   linear model) with analytic Jacobians.
//! - [`shooting`]: shooting grid, extended parameter vector, objective and
//!   scalarized continuity constraints with sparse adjoint gradients.
//! - [`sensitivity`]: forward variational sensitivities and central finite
//!   differences, used as independent oracles for the adjoint gradients, plus
//!   an integration-cost accounting probe.
//! - [`nlp`]: the SQP solver (KKT step, merit line search, damped BFGS).
//! - [`estimator`]: end-to-end estimation runs, gradient checks, repeated
//!   noise-realization studies, and the single-shooting divergence demo.
//! - [`data_io`]: CSV measurement files, `key = value` config files, seeded
//!   synthetic-data generation, and result writers.

pub mod data_io;
pub mod estimator;
pub mod models;
pub mod nlp;
pub mod ode;
pub mod sensitivity;
pub mod shooting;

pub use estimator::{estimate, EstimationConfig, EstimationResult};
pub use ode::OdeModel;
