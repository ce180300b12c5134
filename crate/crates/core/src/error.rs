use thiserror::Error;

/// Errors raised by the transport, solver and optimizer layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A model or run parameter violates its invariants.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The energy-flux Courant ratio `S·Δz/ΔE` exceeds the configured limit.
    #[error(
        "CFL violation: S·Δz/ΔE = {ratio:.4} exceeds limit {limit} \
         (depth node {depth_node}, energy {energy:.3} MeV)"
    )]
    Cfl {
        ratio: f64,
        limit: f64,
        depth_node: usize,
        energy: f64,
    },

    /// A caller broke an operation precondition (e.g. passed a cemetery state).
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;
