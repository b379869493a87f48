use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use serde_json::json;

use advscope_core::Error;

/// An error response: 400 for bad parameters (naming the field), 404 for
/// unknown ids, 422 when a request is valid but the run lacks the data to
/// answer it, 500 otherwise.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    field: Option<String>,
}

impl ApiError {
    pub fn bad_request(field: &str, message: String) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message,
            field: Some(field.to_string()),
        }
    }

    pub fn not_found(message: String) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message,
            field: None,
        }
    }

    pub fn unprocessable(message: String) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message,
            field: None,
        }
    }

    pub fn internal(message: String) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message,
            field: None,
        }
    }

    pub fn field(&self) -> Option<&str> {
        self.field.as_deref()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let (status, field) = match &e {
            Error::NotFound { .. } => (StatusCode::NOT_FOUND, None),
            Error::InvalidParameter { field, .. } => (StatusCode::BAD_REQUEST, Some(field.to_string())),
            Error::InvalidInput(_) => (StatusCode::BAD_REQUEST, None),
            Error::InsufficientMembers { .. } => (StatusCode::UNPROCESSABLE_ENTITY, None),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, None),
        };
        Self { status, message, field }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message, "status": self.status.as_u16() });
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        (self.status, axum::Json(body)).into_response()
    }
}
