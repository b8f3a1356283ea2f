use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use serde::Serialize;
use serde_json::Value;

use ctower_core::cluster::ClusterError;
use ctower_core::environment::{EnvironmentError, EnvironmentParseError};
use ctower_core::experiment::ExperimentError;
use ctower_core::submitter::SubmitError;
use ctower_core::template::TemplateError;

/// Error body returned by every failing route.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub http_status: StatusCode,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

/// Fixed code to HTTP status table.
pub fn status_for(code: &str) -> StatusCode {
    match code {
        "ValidationFailed" | "ParseError" | "MissingRequiredParameter" | "UnknownParameter" | "ResultInvalid"
        | "NonFiniteMetric" | "InvalidTelemetry" | "YamlSyntax" | "MissingField" | "UnknownField" | "InvalidField" => {
            StatusCode::BAD_REQUEST
        }
        "Unauthenticated" => StatusCode::UNAUTHORIZED,
        "NotFound" | "EnvironmentNotFound" | "UnknownHandle" => StatusCode::NOT_FOUND,
        "MethodNotAllowed" => StatusCode::METHOD_NOT_ALLOWED,
        "Conflict" | "IllegalTransition" | "AlreadyTerminal" | "InUse" | "DuplicateNodeId"
        | "Refused" => StatusCode::CONFLICT,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ApiError { http_status: status_for(code), code: code.to_string(), message: message.into(), details: None }
    }

    pub fn with_details(mut self, details: impl Serialize) -> Self {
        self.details = serde_json::to_value(details).ok();
        self
    }

    pub fn parse(message: impl Into<String>) -> Self {
        ApiError::new("ParseError", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError::new("NotFound", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new("Internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::to_string(&self).expect("error body serializes");
        (self.http_status, [(axum::http::header::CONTENT_TYPE, "application/json")], body).into_response()
    }
}

impl From<ExperimentError> for ApiError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Template(t) => t.into(),
            ExperimentError::Submit(s) => s.into(),
            ExperimentError::ValidationFailed(ref v) => {
                let details = v.clone();
                ApiError::new(e.code(), e.to_string()).with_details(details)
            }
            other => ApiError::new(other.code(), other.to_string()),
        }
    }
}

impl From<TemplateError> for ApiError {
    fn from(e: TemplateError) -> Self {
        match &e {
            TemplateError::ValidationFailed(v) => {
                let details = v.clone();
                ApiError::new(e.code(), e.to_string()).with_details(details)
            }
            TemplateError::ResultInvalid(v) => {
                let details = v.clone();
                ApiError::new(e.code(), e.to_string()).with_details(details)
            }
            _ => ApiError::new(e.code(), e.to_string()),
        }
    }
}

impl From<EnvironmentError> for ApiError {
    fn from(e: EnvironmentError) -> Self {
        match e {
            EnvironmentError::Parse(p) => p.into(),
            other => ApiError::new(other.code(), other.to_string()),
        }
    }
}

impl From<EnvironmentParseError> for ApiError {
    fn from(e: EnvironmentParseError) -> Self {
        ApiError::new(e.code(), e.to_string())
    }
}

impl From<SubmitError> for ApiError {
    fn from(e: SubmitError) -> Self {
        ApiError::new(e.code(), e.to_string())
    }
}

impl From<ClusterError> for ApiError {
    fn from(e: ClusterError) -> Self {
        ApiError::new(e.code(), e.to_string())
    }
}
