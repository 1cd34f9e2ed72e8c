use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

use ams_core::ledger::TapScriptError;
use ams_core::outreach::OutreachError;
use ams_core::{LedgerError, RosterError, StoreError, SyncError, TagError};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Roster(#[from] RosterError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Outreach(#[from] OutreachError),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    TapScript(#[from] TapScriptError),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl GatewayError {
    pub fn status(&self) -> StatusCode {
        use GatewayError::*;
        match self {
            Roster(e) => match e {
                RosterError::UnknownLecture(_) | RosterError::UnknownStudent(_) => {
                    StatusCode::NOT_FOUND
                }
                RosterError::TagAlreadyBound { .. } | RosterError::StudentAlreadyBound { .. } => {
                    StatusCode::CONFLICT
                }
                RosterError::MalformedCsv(_) | RosterError::InvalidLecture(_) => {
                    StatusCode::BAD_REQUEST
                }
            },
            Ledger(e) => match e {
                LedgerError::UnknownLecture(_) | LedgerError::UnknownSession(_) => {
                    StatusCode::NOT_FOUND
                }
                LedgerError::SessionAlreadyOpen(_) | LedgerError::SessionClosed(_) => {
                    StatusCode::CONFLICT
                }
            },
            Store(e) => match e {
                StoreError::UnknownLecture(_) | StoreError::NoSnapshot(_) => StatusCode::NOT_FOUND,
                StoreError::IoFailure(_) => StatusCode::INTERNAL_SERVER_ERROR,
                _ => StatusCode::BAD_REQUEST,
            },
            Sync(e) => match e {
                SyncError::TokenMismatch => StatusCode::FORBIDDEN,
                SyncError::VersionMismatch { .. } | SyncError::ProtocolViolation(_) => {
                    StatusCode::CONFLICT
                }
                SyncError::TransportFailure(_) | SyncError::MalformedFrame(_) => {
                    StatusCode::BAD_GATEWAY
                }
                SyncError::KeyMismatch(..) | SyncError::MalformedScenario(_) => {
                    StatusCode::BAD_REQUEST
                }
            },
            Outreach(e) => match e {
                OutreachError::UnknownLecture(_) | OutreachError::NoMatchingAbsence { .. } => {
                    StatusCode::NOT_FOUND
                }
                OutreachError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            },
            Tag(_) | TapScript(_) | BadRequest(_) => StatusCode::BAD_REQUEST,
            NotFound(_) => StatusCode::NOT_FOUND,
            Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let status = self.status();
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}
