use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("format error in `{field}`: {reason}")]
    Format { field: String, reason: String },
    #[error("numeric failure in {location}: {detail}")]
    Numeric { location: String, detail: String },
    #[error("training failed at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },
    #[error("{0} used before it was fitted")]
    NotFitted(&'static str),
    #[error("infeasible instance: {0}")]
    Infeasible(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nn(#[from] gormpo_nn::NnError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Param(msg.into()))
}

pub(crate) fn format_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Format {
        field: field.into(),
        reason: reason.into(),
    }
}
