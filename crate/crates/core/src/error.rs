//! Error taxonomy shared by every module.
//!
//! Variants map onto process exit codes: config/shape/contract problems are
//! caller mistakes (2), data problems are bad or missing artifacts (3), and
//! numeric problems are NaN/domain failures inside a computation (4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DlabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DlabError {
    pub fn config(msg: impl Into<String>) -> Self {
        DlabError::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        DlabError::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        DlabError::Numeric(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        DlabError::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        DlabError::Contract(msg.into())
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            DlabError::Config(_) | DlabError::Shape(_) | DlabError::Contract(_) => 2,
            DlabError::Data(_) | DlabError::Io(_) | DlabError::Json(_) => 3,
            DlabError::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, DlabError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_cli_contract() {
        assert_eq!(DlabError::config("x").exit_code(), 2);
        assert_eq!(DlabError::shape("x").exit_code(), 2);
        assert_eq!(DlabError::contract("x").exit_code(), 2);
        assert_eq!(DlabError::data("x").exit_code(), 3);
        assert_eq!(DlabError::numeric("x").exit_code(), 4);
    }
}
