use thiserror::Error;

/// Errors raised by the solvers, evaluators and study pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported dimension {0}; only 1 and 2 are supported")]
    UnsupportedDimension(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("newton iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("degenerate linearization: {0}")]
    DegenerateLinearization(String),

    #[error("linear cell residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    LinearResidual { residual: f64, tol: f64 },

    #[error("solve failed at {location}: {inner}")]
    AtNode {
        location: String,
        inner: Box<Error>,
    },

    #[error("table range exceeded: {0}")]
    TableRange(String),

    #[error("coverage failure: {0}")]
    Coverage(String),

    #[error("crossing characteristics: {0}")]
    CrossingCharacteristics(String),

    #[error("inadmissible initial data: {0}")]
    Inadmissible(String),

    #[error("outside window: {0}")]
    OutsideWindow(String),

    #[error("grid invariant violated: {0}")]
    GridInvariant(String),

    #[error("reference solution blew up at step {step} (t = {time:.6})")]
    BlowUp { step: usize, time: f64 },

    #[error("insufficient rows: {0}")]
    InsufficientRows(String),

    #[error("stage `{stage}` failed: {inner}")]
    Stage {
        stage: String,
        inner: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at(location: impl Into<String>, source: Error) -> Self {
        Error::AtNode {
            location: location.into(),
            inner: Box::new(source),
        }
    }

    pub(crate) fn stage(stage: impl Into<String>, source: Error) -> Self {
        Error::Stage {
            stage: stage.into(),
            inner: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
