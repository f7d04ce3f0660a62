//! Robustness analysis of dephasing-stabilized spin networks under
//! structured Hamiltonian perturbations.
//!
//! The numerical core is generic over the scalar type ([`Real`]); the
//! `*64` aliases below fix it to `f64`, which is what the experiment
//! harness and the CLI use.

pub mod error;
pub mod experiments;
pub mod fit;
pub mod linalg;
pub mod scalar;

pub mod bloch;
pub mod control;
pub mod deltamax;
pub mod dephasing;
pub mod dynamics;
pub mod problem;
pub mod spin_model;
pub mod stats;
pub mod transfer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Hamiltonian64 = spin_model::Hamiltonian<f64>;
pub type NetworkSpec64 = spin_model::NetworkSpec<f64>;
pub type PerturbationStructure64 = spin_model::PerturbationStructure<f64>;
pub type DephasingProcess64 = dephasing::DephasingProcess<f64>;
pub type HermitianBasis64 = bloch::HermitianBasis<f64>;
pub type BlochGenerator64 = bloch::BlochGenerator<f64>;
pub type PerturbationProblem64 = problem::PerturbationProblem<f64>;
pub type TransferEvaluation64 = transfer::TransferEvaluation<f64>;
pub type DeltaMaxResult64 = deltamax::DeltaMaxResult<f64>;
