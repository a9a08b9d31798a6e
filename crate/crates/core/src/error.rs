use thiserror::Error;

/// Errors raised anywhere in the library or harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate batch: {0}")]
    Degenerate(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("snapshot mismatch: {0}")]
    Snapshot(String),

    #[error("wrong model mode: {0}")]
    Mode(String),

    #[error("non-finite loss at step {step} (lr {lr}, task loss {task_loss}, lbc loss {lbc_loss})")]
    NonFinite {
        step: usize,
        lr: f64,
        task_loss: f64,
        lbc_loss: f64,
    },

    #[error("pretraining reached eval-A accuracy {accuracy:.3} after {steps} steps, below the {target:.3} threshold")]
    Pretraining {
        steps: usize,
        accuracy: f64,
        target: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by invalid user input (config, flags, files)
    /// rather than by a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parameter(_) | Error::Input(_) | Error::Io(_) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
