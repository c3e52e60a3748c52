//! Two-phase joint model of longitudinal biomarkers and an interval-censored
//! event time, fitted by spline sieve maximum likelihood.

mod error;
pub mod initializer;
pub mod io;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod quadrature;
pub mod scalar;
pub mod simulator;
pub mod spline;
pub mod study;

pub use error::Error;
pub use model::{Dataset, LogCholesky, Parameters, Subject, Visit};
pub use scalar::Real;

pub type QuadRuleF64 = quadrature::QuadRule<f64>;
pub type QuadRuleF32 = quadrature::QuadRule<f32>;
pub type HermiteGridF64 = quadrature::HermiteGrid<f64>;
pub type SplineSpecF64 = spline::SplineSpec<f64>;
pub type SplineSpecF32 = spline::SplineSpec<f32>;
