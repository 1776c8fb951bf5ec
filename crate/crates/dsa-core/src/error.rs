//! Crate-wide error type and the process exit codes the CLI maps it onto.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DsaError>;

#[derive(Debug, Error)]
pub enum DsaError {
    /// Tensor-op shape mismatch; the message names both offending shapes.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An op produced or received NaN/Inf. Never silently propagated.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// `backward` called twice without a fresh forward pass.
    #[error("tape already consumed by backward; rebuild the graph before differentiating again")]
    TapeConsumed,

    /// A gradient was requested for a node the sweep never reached.
    #[error("no gradient recorded for node {0}")]
    MissingGrad(usize),

    #[error("bad magic in {what}: expected {expected:?}, found {found:?}")]
    BadMagic {
        what: &'static str,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{what} version mismatch: file has {found}, reader supports {supported}")]
    VersionMismatch {
        what: &'static str,
        found: u16,
        supported: u16,
    },

    #[error("truncated payload in {what}: {detail}")]
    Truncated { what: &'static str, detail: String },

    /// Structurally valid file whose contents violate a documented invariant.
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    /// Invalid run configuration (bad flag value, incompatible options).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training/attack diverged; message carries epoch/step context.
    #[error("numerical failure: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DsaError {
    /// Process exit code for the CLI: 1 usage, 2 data/format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            DsaError::Config(_) => 1,
            DsaError::BadMagic { .. }
            | DsaError::VersionMismatch { .. }
            | DsaError::Truncated { .. }
            | DsaError::Malformed { .. }
            | DsaError::Io(_)
            | DsaError::Json(_) => 2,
            DsaError::NonFinite { .. }
            | DsaError::Diverged(_)
            | DsaError::Shape { .. }
            | DsaError::TapeConsumed
            | DsaError::MissingGrad(_) => 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_partition_the_variants() {
        assert_eq!(DsaError::Config("x".into()).exit_code(), 1);
        assert_eq!(
            DsaError::BadMagic {
                what: "checkpoint",
                expected: *b"DSAV",
                found: *b"XXXX",
            }
            .exit_code(),
            2
        );
        assert_eq!(
            DsaError::Truncated {
                what: "dataset",
                detail: "eof".into()
            }
            .exit_code(),
            2
        );
        assert_eq!(
            DsaError::NonFinite {
                context: "softmax".into()
            }
            .exit_code(),
            3
        );
        assert_eq!(DsaError::TapeConsumed.exit_code(), 3);
    }
}
