//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("operands live on different lattices")]
    LatticeMismatch,

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("invalid conductance law: {0}")]
    InvalidLaw(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time step dt = {dt} violates the stability bound dt <= 1/(2d) = {bound}")]
    UnstableTimeStep { dt: f64, bound: f64 },

    #[error("time {t} is not a multiple of dt = {dt}")]
    OffGridTime { t: f64, dt: f64 },

    #[error("endpoints of edge {edge} are disconnected in the positive-conductance subgraph")]
    Disconnected { edge: usize },

    #[error("detour scan for edge {edge} exhausted after {steps} steps in every direction")]
    ScanExhausted { edge: usize, steps: usize },

    #[error(
        "solver did not converge in {iterations} iterations (relative residual {residual:.3e})"
    )]
    NonConverged { iterations: usize, residual: f64 },

    #[error("observable support (radius {radius}) exceeds the torus half-width {half_width}")]
    SupportExceedsTorus { radius: usize, half_width: usize },

    #[error("configuration invalid:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
