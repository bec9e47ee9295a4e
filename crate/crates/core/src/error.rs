//! Shared error type for the whole toolkit.

/// Axis names used in range / dimension errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
    /// Non-spatial tensor axis (batch, channel, ...), identified by position.
    Tensor(usize),
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::X => write!(f, "x"),
            Axis::Y => write!(f, "y"),
            Axis::Z => write!(f, "z"),
            Axis::Tensor(i) => write!(f, "axis {i}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("range error on {axis} axis: {lo}..={hi} outside extent {extent}")]
    RangeError {
        axis: Axis,
        lo: i64,
        hi: i64,
        extent: usize,
    },

    #[error("dimension error on {axis} axis: expected {expected}, got {actual}")]
    DimError {
        axis: Axis,
        expected: usize,
        actual: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    /// Wraps an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// True for errors that should map to exit code 2 (bad configuration)
    /// rather than 1 (runtime failure).
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
