use std::io;

/// Errors raised anywhere in the training and evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit the operation at a graph node.
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    /// An operation produced NaN or an infinity.
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    /// Two parameter sets differ in names, order or shapes.
    #[error("incompatible parameter sets: {0}")]
    Incompatible(String),
    /// A caller-side precondition does not hold.
    #[error("contract violated: {0}")]
    Contract(String),
    /// A client failed during a federated round.
    #[error("client {center_id} failed: {source}")]
    Client {
        center_id: u32,
        #[source]
        source: Box<Error>,
    },
    /// A binary archive or checkpoint could not be decoded.
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True when the error (or the error it wraps) is a numeric failure.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::Client { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
