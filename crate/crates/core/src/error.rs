use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("autodiff: {0}")]
    Autodiff(String),
    #[error("anchor {anchor} has no admissible negatives (r_f = {r_f} min)")]
    EmptyNegatives { anchor: usize, r_f: f64 },
    #[error("graph: {0}")]
    Graph(String),
    #[error("data: {0}")]
    Data(String),
    #[error("config: invalid keys [{}]", .0.join(", "))]
    Config(Vec<String>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
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

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Context { source, .. } => source.class(),
            Error::Config(_) | Error::Json(_) => ErrorClass::Config,
            Error::Data(_) | Error::Graph(_) | Error::Io(_) | Error::Checkpoint(_) => {
                ErrorClass::Data
            }
            Error::Shape { .. }
            | Error::NonFinite { .. }
            | Error::InvalidArgument(_)
            | Error::Autodiff(_)
            | Error::EmptyNegatives { .. } => ErrorClass::Numeric,
        }
    }
}
