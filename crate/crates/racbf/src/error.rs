use thiserror::Error;

/// Errors surfaced by the simulation and estimation layers.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("simulation diverged at t = {t:.6} s: {what}")]
    Divergence { t: f64, what: String },

    #[error("QP infeasible at t = {t:.6} s and abort policy is active")]
    QpInfeasibleAbort { t: f64 },

    #[error("regressor memory ill-conditioned (cond(P) = {cond:.3e})")]
    SingularMemory { cond: f64 },

    #[error("envelope evaluated at negative time t = {t}")]
    NegativeTime { t: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
