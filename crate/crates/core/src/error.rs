use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: unknown variable, missing model, bad hyperparameter.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A NaN or infinity appeared; `primitive` names the operation that produced it.
    #[error("non-finite value produced by `{primitive}`{}", at_time(.time))]
    NumericFailure {
        primitive: String,
        time: Option<f64>,
    },

    /// The adaptive integrator ran out of steps.
    #[error("integration diverged: step budget of {max_steps} exhausted at t = {last_time}")]
    Divergence { max_steps: usize, last_time: f64 },

    /// Too many consecutive training iterations failed.
    #[error("training aborted at iteration {iteration} after {failures} consecutive failures: {source}")]
    TrainingAborted {
        iteration: usize,
        failures: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn at_time(t: &Option<f64>) -> String {
    match t {
        Some(t) => format!(" at t = {t}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn numeric(primitive: impl Into<String>) -> Self {
        Error::NumericFailure {
            primitive: primitive.into(),
            time: None,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Attach an integration time to a numeric failure that lacks one.
    pub fn with_time(self, t: f64) -> Self {
        match self {
            Error::NumericFailure {
                primitive,
                time: None,
            } => Error::NumericFailure {
                primitive,
                time: Some(t),
            },
            other => other,
        }
    }
}
