use thiserror::Error;

use crate::grid::Basis;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("basis mismatch: expected {expected:?}, state is in {found:?}")]
    Basis { expected: Basis, found: Basis },

    #[error("shape mismatch: expected {expected} values, got {found}")]
    Shape { expected: usize, found: usize },

    #[error("R = {r} bohr is outside the model domain [{lo}, {hi}]")]
    Domain { r: f64, lo: f64, hi: f64 },

    #[error("level degeneracy at R = {r} bohr: Omega = {omega:e} hartree")]
    Singularity { r: f64, omega: f64 },

    #[error("cosine filter collapsed: success probability {0:e} below 1e-6")]
    FilterCollapse(f64),

    #[error("no convergence after {steps} steps: {what}")]
    NonConvergence { steps: usize, what: String },

    #[error("time step too large: dt * omega = {0} (must be < 0.1)")]
    StepTooLarge(f64),

    #[error("degenerate state: {0}")]
    Degenerate(String),

    #[error("dividing surface poorly resolved: smoothed delta has grid mass {0}")]
    SurfaceResolution(f64),

    #[error("non-positive rate {rate:e} at T = {temperature} hartree")]
    NonPositiveRate { rate: f64, temperature: f64 },

    #[error("table parse error: {0}")]
    Parse(String),

    #[error("invalid table: {0}")]
    Table(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures that come from the numerics rather than from the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::FilterCollapse(_)
                | Error::NonConvergence { .. }
                | Error::Singularity { .. }
                | Error::Degenerate(_)
                | Error::NonPositiveRate { .. }
                | Error::StepTooLarge(_)
                | Error::Domain { .. }
        )
    }
}
