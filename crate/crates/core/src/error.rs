use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit-code contract: configuration problems
/// exit 2, solver non-convergence exits 3, an infeasible exact oracle
/// exits 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("quadrature order {0} out of supported range 2..=512")]
    OrderOutOfRange(usize),

    #[error("integrand is not finite at quadrature node {node}")]
    NonFiniteIntegrand { node: f64 },

    #[error("fixed-point iteration did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("exact oracle infeasible: {detail} ({configs} configurations exceed the budget of {budget})")]
    OracleInfeasible {
        detail: String,
        configs: u128,
        budget: u128,
    },

    #[error("exact oracle does not support this network: {0}")]
    OracleUnsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
