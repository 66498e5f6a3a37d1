//! Functional Itô calculus on path and path-measure space, mean-field BSDE
//! solvers and verification tools for path-dependent master equations.
//!
//! - [`pathspace`]: step paths on a uniform grid, stopping, bumps,
//!   concatenation, particle measures and Wasserstein estimates.
//! - [`funcalc`]: non-anticipative functionals with analytic strong vertical
//!   and measure derivatives, plus finite-difference estimators.
//! - [`ito`]: residual tests of the Itô-Dupire formula and its partial form.
//! - [`bsde`]: forward simulation, regression BSDE solvers, mean-field Picard
//!   loops and variation BSDEs.
//! - [`master`]: the decoupling field, Sobolev evaluation, mollification,
//!   closed forms and the master-equation checks.

pub mod bsde;
pub mod error;
pub mod funcalc;
pub mod ito;
pub mod master;
pub mod pathspace;

pub use error::{Error, Result};
pub use funcalc::{
    derivative_bundle, eval_functional, horizontal_derivative, measure_derivative, strong_vertical_derivative, Composite, DerivativeBundle,
    FdConfig, FunctionalSpec, Leaf, Mode, Order, Profile, SmoothMap, TimeWeight,
};
pub use master::mollifier::Mollifier;
pub use pathspace::{Coupling, DiscretePath, ParticleMeasure, SnapMode, TimeGrid};
