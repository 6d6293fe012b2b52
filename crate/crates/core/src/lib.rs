//! Penalized survey-weighted quadratic inference functions (QIF) for marginal
//! regression on longitudinal data collected under complex sampling.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] – logit marginal mean/variance model and per-cluster Jacobians.
//! * [`correlation`] – working correlation structures and their basis matrices.
//! * [`qif`] – survey-weighted extended quasi-score, its covariance, the QIF
//!   objective with analytic derivatives, and the unpenalized fit.
//! * [`scad`] – SCAD penalty and local quadratic approximation weights.
//! * [`penalized`] – SCAD-penalized QIF, WBIC tuning, sandwich and one-step
//!   bootstrap variance.
//! * [`gee`] – survey-weighted GEE baseline (plain and penalized).
//! * [`lab`] – finite populations, PPS-with-replacement sampling, Monte Carlo
//!   campaigns and the selection/bias/variance metrics.

pub mod correlation;
pub mod error;
pub mod gee;
pub mod lab;
mod linalg;
pub mod model;
pub mod penalized;
pub mod qif;
pub mod rng;
pub mod scad;

pub use correlation::{BasisSet, CorrelationKind, CorrelationStructure};
pub use error::{Error, Result};
pub use model::{ClusterEvaluation, ClusterRecord, Family, MarginalModel};
pub use qif::{FitResult, QifOptions, QifState, SurveySample};
pub use scad::PenaltySpec;
