//! Error taxonomy shared by the simulation and analysis stages.
//!
//! The variants are grouped by how a caller should react, and the CLI maps
//! them onto process exit codes: configuration, domain, precondition, data
//! and resource problems are data errors (exit 2); estimation and fit
//! failures (exit 3) mean the inputs were well-formed but did not support a
//! finite estimate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its physical domain (negative rate,
    /// transmission above one, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An input stream violates a documented precondition, e.g. timetags
    /// that are not sorted in time.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A configuration file, run directory, or derived setup is
    /// inconsistent or incomplete.
    #[error("configuration error: {0}")]
    Config(String),

    /// An estimator could not produce a finite value from the data
    /// (empty windows, non-positive denominators, no coincidences).
    #[error("estimation failed: {0}")]
    Estimation(String),

    /// A nonlinear fit did not converge; the message carries diagnostics.
    #[error("fit failed: {0}")]
    Fit(String),

    /// The request would exceed event-count or memory capacity.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of estimation rather than of input data; the CLI
    /// distinguishes the two classes in its exit code.
    pub fn is_estimation(&self) -> bool {
        matches!(self, Error::Estimation(_) | Error::Fit(_))
    }
}
