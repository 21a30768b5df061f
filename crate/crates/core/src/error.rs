use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A simulated state stopped being finite.
    #[error("divergence at t={t} (step {step}{}): state {state:?}", particle_suffix(.particle))]
    Divergence {
        t: f64,
        step: usize,
        particle: Option<usize>,
        state: Vec<f64>,
    },

    /// A study stopped early; `partial` holds the rows finished before the failure.
    #[error("study '{}' aborted after {} rows: {source}", partial.study, partial.rows.len())]
    StudyAborted {
        partial: Box<crate::experiments::StudyResult>,
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn particle_suffix(p: &Option<usize>) -> String {
    match p {
        Some(i) => format!(", particle {i}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Attaches a particle index to a divergence raised by a single-path routine.
    pub(crate) fn with_particle(self, particle: usize) -> Self {
        match self {
            Error::Divergence { t, step, state, .. } => Error::Divergence {
                t,
                step,
                particle: Some(particle),
                state,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
