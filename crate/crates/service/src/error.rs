use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use ecgx_exchange::ExchangeError;
use serde::{Deserialize, Serialize};

/// Every error response carries exactly one of these codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    InvalidRequest,
    ParseFailed,
    NormalizeFailed,
    LabelValidation,
    InvalidConfig,
    PayloadTooLarge,
    NotFound,
    MethodNotAllowed,
    Conflict,
    NotReady,
    InvalidState,
    AnalysisFailed,
    NotExecutable,
    RegistryNotConfigured,
    RegistryUnavailable,
    RegistryError,
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 17] = [
        ErrorCode::InvalidRequest,
        ErrorCode::ParseFailed,
        ErrorCode::NormalizeFailed,
        ErrorCode::LabelValidation,
        ErrorCode::InvalidConfig,
        ErrorCode::PayloadTooLarge,
        ErrorCode::NotFound,
        ErrorCode::MethodNotAllowed,
        ErrorCode::Conflict,
        ErrorCode::NotReady,
        ErrorCode::InvalidState,
        ErrorCode::AnalysisFailed,
        ErrorCode::NotExecutable,
        ErrorCode::RegistryNotConfigured,
        ErrorCode::RegistryUnavailable,
        ErrorCode::RegistryError,
        ErrorCode::Internal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::InvalidRequest => "invalid_request",
            ErrorCode::ParseFailed => "parse_failed",
            ErrorCode::NormalizeFailed => "normalize_failed",
            ErrorCode::LabelValidation => "label_validation",
            ErrorCode::InvalidConfig => "invalid_config",
            ErrorCode::PayloadTooLarge => "payload_too_large",
            ErrorCode::NotFound => "not_found",
            ErrorCode::MethodNotAllowed => "method_not_allowed",
            ErrorCode::Conflict => "conflict",
            ErrorCode::NotReady => "not_ready",
            ErrorCode::InvalidState => "invalid_state",
            ErrorCode::AnalysisFailed => "analysis_failed",
            ErrorCode::NotExecutable => "not_executable",
            ErrorCode::RegistryNotConfigured => "registry_not_configured",
            ErrorCode::RegistryUnavailable => "registry_unavailable",
            ErrorCode::RegistryError => "registry_error",
            ErrorCode::Internal => "internal",
        }
    }

    pub fn from_name(s: &str) -> Option<ErrorCode> {
        ErrorCode::ALL.into_iter().find(|c| c.as_str() == s)
    }

    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::InvalidRequest
            | ErrorCode::ParseFailed
            | ErrorCode::NormalizeFailed
            | ErrorCode::LabelValidation
            | ErrorCode::InvalidConfig => StatusCode::BAD_REQUEST,
            ErrorCode::PayloadTooLarge => StatusCode::PAYLOAD_TOO_LARGE,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::MethodNotAllowed => StatusCode::METHOD_NOT_ALLOWED,
            ErrorCode::Conflict | ErrorCode::NotReady | ErrorCode::InvalidState => StatusCode::CONFLICT,
            ErrorCode::AnalysisFailed | ErrorCode::NotExecutable => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::RegistryNotConfigured => StatusCode::SERVICE_UNAVAILABLE,
            ErrorCode::RegistryUnavailable | ErrorCode::RegistryError => StatusCode::BAD_GATEWAY,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    /// Code used when some other layer produced a bare error status.
    pub fn for_status(status: StatusCode) -> ErrorCode {
        match status {
            StatusCode::NOT_FOUND => ErrorCode::NotFound,
            StatusCode::METHOD_NOT_ALLOWED => ErrorCode::MethodNotAllowed,
            StatusCode::PAYLOAD_TOO_LARGE => ErrorCode::PayloadTooLarge,
            StatusCode::CONFLICT => ErrorCode::Conflict,
            StatusCode::UNPROCESSABLE_ENTITY => ErrorCode::AnalysisFailed,
            StatusCode::BAD_GATEWAY => ErrorCode::RegistryUnavailable,
            StatusCode::SERVICE_UNAVAILABLE => ErrorCode::RegistryNotConfigured,
            s if s.is_client_error() => ErrorCode::InvalidRequest,
            _ => ErrorCode::Internal,
        }
    }
}

/// Wire shape: `{"error": {"code", "message", "cause"?}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: ErrorCode,
    pub message: String,
    /// Code of the underlying module error, e.g. `truncated` or `no_beats_found`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    pub cause: Option<String>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError { code, message: message.into(), cause: None }
    }

    pub fn caused_by(mut self, cause: &str) -> Self {
        self.cause = Some(cause.into());
        self
    }

    pub fn not_found(what: impl std::fmt::Display) -> Self {
        ApiError::new(ErrorCode::NotFound, format!("{what} not found"))
    }

    pub fn internal(e: impl std::fmt::Display) -> Self {
        ApiError::new(ErrorCode::Internal, e.to_string())
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody { error: ErrorDetail { code: self.code, message: self.message.clone(), cause: self.cause.clone() } }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code.as_str(), self.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self.body())).into_response()
    }
}

impl From<ExchangeError> for ApiError {
    fn from(e: ExchangeError) -> Self {
        let code = match &e {
            ExchangeError::Unreachable(_) | ExchangeError::AuthFailed => ErrorCode::RegistryUnavailable,
            ExchangeError::NotFound(_) => ErrorCode::NotFound,
            ExchangeError::Conflict(_) => ErrorCode::Conflict,
            ExchangeError::NotExecutable(_) => ErrorCode::NotExecutable,
            ExchangeError::Io(_) => ErrorCode::Internal,
            _ => ErrorCode::RegistryError,
        };
        ApiError::new(code, e.to_string()).caused_by(e.code())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip_through_names_and_json() {
        for c in ErrorCode::ALL {
            assert_eq!(ErrorCode::from_name(c.as_str()), Some(c));
            assert_eq!(serde_json::to_value(c).unwrap(), c.as_str());
            assert!(c.status().is_client_error() || c.status().is_server_error());
        }
        let body = ApiError::new(ErrorCode::ParseFailed, "bad").caused_by("truncated").body();
        let v = serde_json::to_value(&body).unwrap();
        assert_eq!(v["error"]["code"], "parse_failed");
        assert_eq!(v["error"]["cause"], "truncated");
    }
}
