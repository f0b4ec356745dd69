use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {what} = {index}, size {size}")]
    Range {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("support violation at prompt {x}, response {a}: reference probability is zero")]
    Support { x: usize, a: usize },

    #[error("empty preference data")]
    EmptyData,

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("{property} violated: {detail}")]
    PropertyViolation { property: &'static str, detail: String },

    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_index(what: &'static str, index: usize, size: usize) -> Result<()> {
    if index < size {
        Ok(())
    } else {
        Err(Error::Range { what, index, size })
    }
}
