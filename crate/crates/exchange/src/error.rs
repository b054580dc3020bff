use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExchangeError {
    #[error("opset {0} is above the supported maximum of 20")]
    OpsetTooHigh(u64),
    #[error("manifest is missing field `{0}`")]
    MissingField(String),
    #[error("sha256 must be 64 lowercase hex characters, got {0:?}")]
    BadHash(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("registry unreachable: {0}")]
    Unreachable(String),
    #[error("registry rejected the credentials")]
    AuthFailed,
    #[error("unexpected registry response: {0}")]
    ProtocolError(String),
    #[error("payload hash {actual} does not match manifest hash {expected}")]
    HashMismatch { expected: String, actual: String },
    #[error("{0} already exists in the registry")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("corrupt model payload: {0}")]
    CorruptPayload(String),
    #[error("model kind {0} cannot be executed natively")]
    NotExecutable(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl ExchangeError {
    pub fn code(&self) -> &'static str {
        match self {
            ExchangeError::OpsetTooHigh(_) => "opset_too_high",
            ExchangeError::MissingField(_) => "missing_field",
            ExchangeError::BadHash(_) => "bad_hash",
            ExchangeError::InvalidManifest(_) => "invalid_manifest",
            ExchangeError::Unreachable(_) => "registry_unreachable",
            ExchangeError::AuthFailed => "auth_failed",
            ExchangeError::ProtocolError(_) => "protocol_error",
            ExchangeError::HashMismatch { .. } => "hash_mismatch",
            ExchangeError::Conflict(_) => "conflict",
            ExchangeError::NotFound(_) => "not_found",
            ExchangeError::CorruptPayload(_) => "corrupt_payload",
            ExchangeError::NotExecutable(_) => "not_executable",
            ExchangeError::Io(_) => "io_error",
        }
    }
}

impl From<std::io::Error> for ExchangeError {
    fn from(e: std::io::Error) -> Self {
        ExchangeError::Io(e.to_string())
    }
}
