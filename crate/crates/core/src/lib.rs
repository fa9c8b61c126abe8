//! Joint models for multiple Gaussian longitudinal markers and multiple
//! time-to-event outcomes (terminal, competing, recurrent, with frailties and
//! delayed entry), estimated by maximizing a Gaussian variational lower bound
//! on the marginal likelihood with a partially separable quasi-Newton method.
//!
//! The crate is organized around the estimation pipeline:
//!
//! * [`basis`] — spline/polynomial time bases and their derivatives/integrals
//! * [`quad`] — Gauss–Legendre, Gauss–Hermite and adaptive Gauss–Hermite rules
//! * [`data`], [`spec`], [`params`], [`design`], [`validate`] — data schema,
//!   model specification, parameter packing and cached design matrices
//! * [`lowerbound`] — the per-individual variational lower bound and its
//!   analytic gradient
//! * [`marginal`] — a slower quadrature-based reference log-likelihood
//! * [`psqn`] — the partially separable quasi-Newton maximizer
//! * [`init`] — starting values from separate sub-model fits
//! * [`fit`] — the end-to-end fit driver
//! * [`inference`] — observed information, Wald and profile intervals
//! * [`simulate`] — data generation for validation studies
//! * [`cli`] — the command-line front end

pub mod basis;
pub mod cli;
pub mod data;
pub mod design;
pub mod fit;
pub mod inference;
pub mod init;
pub mod lowerbound;
pub mod marginal;
pub mod numdiff;
pub mod params;
pub mod psqn;
pub mod quad;
pub mod simulate;
pub mod spec;
pub mod validate;

/// A single validation finding. `fit` refuses to start when any
/// error-severity diagnostic is present.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev} [{}]: {}", self.code, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("model/data validation failed: {}", format_diagnostics(.0))]
    Validation(Vec<Diagnostic>),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
