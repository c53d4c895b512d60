use alloc::string::String;

/// Errors produced by the engine.
///
/// The variants follow the failure classes the front-end maps onto exit
/// codes: configuration problems, numerical divergence, and everything else.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the domain of a function (e.g. `t > 1`).
    #[error("domain error: {0}")]
    Domain(String),

    /// Mismatched vector or matrix dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration or construction parameters.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite input or output in a numerical routine.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A rollout produced a non-finite state.
    #[error("rollout diverged at step {step}")]
    Diverged { step: usize },

    /// The API was used incorrectly (e.g. backward from a non-scalar node).
    #[error("usage error: {0}")]
    Usage(String),

    /// A training routine failed to reach its target.
    #[error("training failed: {message}")]
    Training {
        message: String,
        /// Loss or accuracy curve recorded before the failure.
        curve: alloc::vec::Vec<f64>,
    },

    /// Malformed serialized data.
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// True for errors that stem from the run configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Domain(_) | Error::Shape(_))
    }
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
