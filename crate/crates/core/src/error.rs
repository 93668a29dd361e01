use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("layout error: expected {expected}, got {actual}")]
    Layout {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("missing component: {0}")]
    MissingComponent(&'static str),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("kind mismatch: expected {expected}, file holds {actual}")]
    KindMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    /// An error annotated with the configuration field or step it came from.
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error beneath any context layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for mistakes in configuration rather than failures while running:
    /// bad config values, shape-incompatible components, unknown names.
    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            Error::Config(_) | Error::Shape(_) | Error::Registry(_) | Error::Json(_) | Error::MissingComponent(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
