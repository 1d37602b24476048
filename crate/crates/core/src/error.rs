use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("checkpoint version {found} is not supported (expected {expected}); re-export the checkpoint with a matching tool version")]
    Version { found: u32, expected: u32 },

    #[error("incompatible inputs: {0}")]
    Compatibility(String),

    #[error("non-finite loss at epoch {epoch}, bag {bag}: {components}")]
    NonFiniteLoss {
        epoch: usize,
        bag: usize,
        components: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
