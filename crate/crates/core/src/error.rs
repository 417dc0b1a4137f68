use alloc::string::String;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class `{class}` missing in {dataset}")]
    MissingClass { class: &'static str, dataset: String },

    #[error("not enough subjects: requested {requested}, available {available}")]
    NotEnoughSubjects { requested: usize, available: usize },

    #[error("invalid pair: {0}")]
    InvalidPair(String),

    #[error("label mismatch: content is {content}, style is {style}")]
    LabelMismatch { content: &'static str, style: &'static str },

    #[error("batch needs two distinct domains, got only {0}")]
    SingleDomain(String),

    #[error("held-out dataset `{0}` must not be used for training")]
    HeldoutAccess(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field,
        reason: reason.into(),
    }
}
