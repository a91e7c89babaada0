use thiserror::Error;

/// Error type shared across the simulator.
#[derive(Debug, Error)]
pub enum SimError {
    /// An argument is outside the domain of the operation (negative opening,
    /// negative rest time, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Degenerate or inconsistent geometry (inverted element, chord missing
    /// the element, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Malformed input file.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Structurally valid input that violates a model invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Inconsistent run configuration (missing sections, empty CMOD overlap,
    /// unknown keys in strict mode, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// The nonlinear solver failed after exhausting its retry budget.
    #[error("solver failure: {0}")]
    Solver(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl SimError {
    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        SimError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
