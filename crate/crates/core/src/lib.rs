//! Asymptotic performance analysis for exact MMSE estimation in multi-layer
//! generalized linear models, with desk-scale Monte Carlo validation.
//!
//! A network alternates random linear mixing with elementwise stochastic
//! activations. In the large-system limit the per-coordinate behavior of the
//! exact posterior-mean estimator collapses onto an equivalent scalar AWGN
//! channel whose noise level solves a small set of coupled scalar equations.
//! This crate solves those equations ([`replica_solver`]), evaluates the
//! equivalent channel ([`scalar_estimators`]), and checks the collapse at
//! small sizes against exact brute-force estimators ([`simulator`]).
//!
//! The `mlglm` binary exposes the same machinery behind `predict`,
//! `simulate`, `validate`, and `sweep` subcommands driven by TOML configs.

pub mod channels;
pub mod cli;
pub mod error;
pub(crate) mod linalg;
pub mod math;
pub mod metrics;
pub mod quadrature;
pub mod replica_solver;
pub mod scalar_estimators;
pub mod simulator;

pub use channels::{Activation, Layer, NetworkSpec, Prior};
pub use error::{Error, Result};
pub use quadrature::HermiteGrid;
pub use replica_solver::{
    solve, solve_slm, FixedPointResult, InitStyle, ReplicaState, SolverOptions,
};
pub use scalar_estimators::SisoChannel;
pub use simulator::{
    decoupling_moment_test, exact_mmse_brute_force, lmmse_avg_mse, lmmse_gaussian_oracle,
    run_trials, sample_network, FiniteNetwork, OracleKind, TrialBatch, TrialSettings,
};
