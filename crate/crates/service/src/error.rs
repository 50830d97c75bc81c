use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

/// Error body `{"error": message}` with an HTTP status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    pub fn no_checkpoint() -> Self {
        Self::new(StatusCode::CONFLICT, "no checkpoint loaded")
    }

    pub fn unknown(kind: &str, id: &str) -> Self {
        Self::bad_request(format!("unknown {kind} {id:?}"))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<rcdm::Error> for ApiError {
    fn from(e: rcdm::Error) -> Self {
        use rcdm::Error as E;
        let status = match &e {
            E::Dimension { .. } | E::Shape { .. } | E::Format(_) | E::Checkpoint(_) | E::Image(_) | E::Io { .. } => {
                StatusCode::BAD_REQUEST
            }
            E::InvalidArgument(_)
            | E::UnknownAttribute { .. }
            | E::EmptyClass { .. }
            | E::DegenerateCovariance { .. }
            | E::Timestep { .. }
            | E::Config(_)
            | E::BlankImage => StatusCode::UNPROCESSABLE_ENTITY,
            E::Schedule(_) | E::NonFiniteLoss { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
