use thiserror::Error;

/// Errors produced by the library.
///
/// Numerical routines validate their inputs eagerly so that failures carry
/// enough context to be actionable (which argument, which sizes, which
/// budget), instead of surfacing as NaNs deep inside a solver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input too large: {context} ({got} exceeds the supported limit {limit})")]
    TooLarge {
        context: String,
        got: usize,
        limit: usize,
    },

    #[error(
        "grid budget exceeded: h={h} in dimension {d} enumerates \
         ceil(2pi/h)^(d-1) * ceil(pi/h)^((d-1)(d-2)/2) = {cardinality} points, \
         above the configured cap {cap}; increase h or raise the cap"
    )]
    GridBudgetExceeded {
        d: usize,
        h: f64,
        cardinality: u128,
        cap: u128,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("{stage} stage: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("optimization aborted: {0}")]
    OptimizationFailed(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Label an error with the pipeline stage it came from.
    pub fn stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// Attach a file-path context to an I/O error.
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
        let context = context.into();
        move |source| Error::Io { context, source }
    }

    /// Attach a file-path context to a JSON (de)serialization error.
    pub fn json(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> Error {
        let context = context.into();
        move |source| Error::Json { context, source }
    }
}
