use std::path::PathBuf;

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("window is empty: shrinking by {delta} exhausts axis {axis}")]
    EmptyWindow { delta: f64, axis: usize },

    #[error("invalid window: upper[{axis}] must exceed lower[{axis}]")]
    InvalidWindow { axis: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("carrier lacks a collar of width {needed} around the estimation window on axis {axis}")]
    CollarMissing { needed: f64, axis: usize },

    #[error("degenerate counts for the explicit estimator: {which} is zero")]
    DegenerateCounts { which: &'static str },

    #[error("only {found} interior blocks available; at least 9 are required")]
    TooFewBlocks { found: usize },

    #[error("E E^T is singular or ill-conditioned (condition number {cond:.3e})")]
    SingularE { cond: f64 },

    #[error("test function {label:?} does not match the bound model")]
    ModelMismatch { label: String },

    #[error("only {found} distinct statistic bins observed, need {needed}; the statistic support may lie in a hyperplane")]
    InsufficientSupport { needed: usize, found: usize },

    #[error("non-finite local energy encountered during simulation")]
    NonFiniteEnergy,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration file error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
