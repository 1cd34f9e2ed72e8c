//! HTTP routes used by the operator console.
//!
//! Sessions are addressed as `{lecture_id}@{date}`; the device part of the
//! key is always this gateway's own. JSON bodies are decoded by hand so a
//! malformed body is a 400 like every other input error.

use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use ams_core::{AlertConfig, CanonicalTagId, ReasonSubmission, Session, SessionKey, Timestamp};

use crate::error::GatewayError;
use crate::service::Gateway;

type ApiResult<T> = Result<T, GatewayError>;
type Shared = State<Arc<Gateway>>;

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/lectures/{id}", put(put_lecture))
        .route("/lectures/{id}/roster", post(post_roster).get(get_roster))
        .route("/lectures/{id}/report", get(get_report))
        .route("/lectures/{id}/tabulation", get(get_tabulation))
        .route("/lectures/{id}/unexplained", get(get_unexplained))
        .route("/bindings", post(post_binding))
        .route("/sessions", post(post_session))
        .route("/sessions/{key}/taps", post(post_tap))
        .route("/sessions/{key}/close", post(post_close))
        .route("/sessions/{key}/events", get(get_events))
        .route("/merge", post(post_merge))
        .route("/absence-reasons", post(post_reason))
        .with_state(gateway)
}

fn json_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| GatewayError::BadRequest(format!("invalid body: {e}")))
}

/// Path form of a session key.
pub fn session_path(lecture_id: &str, date: NaiveDate) -> String {
    format!("{lecture_id}@{date}")
}

fn session_key(gateway: &Gateway, raw: &str) -> ApiResult<SessionKey> {
    let bad = || {
        GatewayError::BadRequest(format!(
            "session key must be LECTURE@YYYY-MM-DD, got {raw:?}"
        ))
    };
    let (lecture, date) = raw.rsplit_once('@').ok_or_else(bad)?;
    let date: NaiveDate = date.parse().map_err(|_| bad())?;
    Ok(gateway.session_key(lecture, date))
}

/// `at` may be integer milliseconds or an RFC 3339 string.
fn timestamp(at: Option<Value>) -> ApiResult<Option<Timestamp>> {
    match at {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n
            .as_i64()
            .map(|ms| Some(Timestamp(ms)))
            .ok_or_else(|| GatewayError::BadRequest(format!("bad timestamp {n}"))),
        Some(Value::String(s)) => Timestamp::parse(&s)
            .map(Some)
            .ok_or_else(|| GatewayError::BadRequest(format!("bad timestamp {s:?}"))),
        Some(other) => Err(GatewayError::BadRequest(format!("bad timestamp {other}"))),
    }
}

// -- lectures and roster -----------------------------------------------------

#[derive(Deserialize)]
struct LectureBody {
    title: String,
    #[serde(default)]
    teacher: String,
    planned_sessions: u32,
    alerts: Option<AlertConfig>,
}

async fn put_lecture(
    State(gw): Shared,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let b: LectureBody = json_body(&body)?;
    if let Some(alerts) = &b.alerts {
        alerts
            .validate()
            .map_err(|e| GatewayError::BadRequest(e.to_string()))?;
    }
    let lecture = gw.upsert_lecture(&id, &b.title, &b.teacher, b.planned_sessions, b.alerts)?;
    Ok(Json(lecture).into_response())
}

async fn post_roster(
    State(gw): Shared,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    Ok(Json(gw.ingest_roster(&id, &body)?).into_response())
}

async fn get_roster(State(gw): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(gw.roster(&id)?).into_response())
}

#[derive(Deserialize)]
struct BindingBody {
    student_id: String,
    tag: CanonicalTagId,
    #[serde(default)]
    overwrite: bool,
}

async fn post_binding(State(gw): Shared, body: Bytes) -> ApiResult<Response> {
    let b: BindingBody = json_body(&body)?;
    Ok(Json(gw.bind_card(&b.student_id, b.tag, b.overwrite)?).into_response())
}

// -- sessions ----------------------------------------------------------------

#[derive(Deserialize)]
struct OpenBody {
    lecture_id: String,
    date: NaiveDate,
    at: Option<Value>,
}

#[derive(Serialize)]
struct SessionView {
    key: String,
    #[serde(flatten)]
    session: Session,
}

async fn post_session(State(gw): Shared, body: Bytes) -> ApiResult<Response> {
    let b: OpenBody = json_body(&body)?;
    let session = gw.open_session(&b.lecture_id, b.date, timestamp(b.at)?)?;
    let view = SessionView {
        key: session_path(&session.lecture_id, session.date),
        session,
    };
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

#[derive(Deserialize)]
struct TapBody {
    tag: String,
    at: Option<Value>,
}

async fn post_tap(State(gw): Shared, Path(key): Path<String>, body: Bytes) -> ApiResult<Response> {
    let key = session_key(&gw, &key)?;
    let b: TapBody = json_body(&body)?;
    let tag: CanonicalTagId = b.tag.parse()?;
    Ok(Json(gw.tap(&key, &tag, timestamp(b.at)?)?).into_response())
}

#[derive(Deserialize, Default)]
struct CloseBody {
    at: Option<Value>,
}

async fn post_close(
    State(gw): Shared,
    Path(key): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let key = session_key(&gw, &key)?;
    let b: CloseBody = if body.is_empty() {
        CloseBody::default()
    } else {
        json_body(&body)?
    };
    Ok(Json(gw.close_session(&key, timestamp(b.at)?)?).into_response())
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: u64,
    /// Keep the stream open for new frames; `false` returns the backlog.
    #[serde(default = "yes")]
    follow: bool,
}

fn yes() -> bool {
    true
}

/// Newline-delimited JSON frames from `since` on.
async fn get_events(
    State(gw): Shared,
    Path(key): Path<String>,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Response> {
    let key = session_key(&gw, &key)?;
    let rx = gw.subscribe(&key)?;
    let follow = q.follow;
    let stream = futures::stream::unfold(
        (gw, key, q.since, rx, false),
        move |(gw, key, next, mut rx, ended)| async move {
            if ended {
                return None;
            }
            loop {
                let frames = gw.frames_since(&key, next);
                if let Some(last) = frames.last() {
                    let next = last.seq + 1;
                    let chunk: String = frames.iter().map(|f| f.to_line()).collect();
                    return Some((Ok::<_, std::io::Error>(chunk), (gw, key, next, rx, false)));
                }
                if !follow || rx.changed().await.is_err() {
                    return None;
                }
            }
        },
    );
    Ok((
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        Body::from_stream(stream),
    )
        .into_response())
}

// -- merge, reports, reasons -------------------------------------------------

#[derive(Deserialize)]
struct MergeBody {
    peer_file: Option<std::path::PathBuf>,
    peer_address: Option<String>,
    #[serde(default)]
    token: String,
}

async fn post_merge(State(gw): Shared, body: Bytes) -> ApiResult<Response> {
    let b: MergeBody = json_body(&body)?;
    let report = match (b.peer_file, b.peer_address) {
        (Some(path), None) => gw.merge_file(&path)?,
        (None, Some(addr)) => tokio::task::spawn_blocking(move || gw.merge_peer(&addr, &b.token))
            .await
            .map_err(|e| GatewayError::Io(std::io::Error::other(e)))??,
        _ => {
            return Err(GatewayError::BadRequest(
                "give exactly one of peer_file or peer_address".into(),
            ))
        }
    };
    Ok(Json(report).into_response())
}

#[derive(Deserialize)]
struct ReportQuery {
    #[serde(default = "one")]
    min: usize,
}

fn one() -> usize {
    1
}

async fn get_report(
    State(gw): Shared,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Response> {
    Ok(Json(gw.report(&id, q.min)?).into_response())
}

async fn get_tabulation(State(gw): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    let csv = gw.tabulation_csv(&id)?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

async fn get_unexplained(State(gw): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    let rows: Vec<Value> = gw
        .unexplained(&id)?
        .into_iter()
        .map(|(student_id, date)| json!({ "student_id": student_id, "date": date }))
        .collect();
    Ok(Json(rows).into_response())
}

/// Field names of the reason form; the short aliases match the query
/// string of the follow-up link.
#[derive(Deserialize)]
struct ReasonForm {
    #[serde(alias = "class")]
    lecture_id: String,
    #[serde(alias = "sid")]
    student_id: String,
    date: NaiveDate,
    #[serde(alias = "reason")]
    reason_text: String,
}

async fn post_reason(State(gw): Shared, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let is_form = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/x-www-form-urlencoded"));
    let form: ReasonForm = if is_form {
        serde_urlencoded::from_bytes(&body)
            .map_err(|e| GatewayError::BadRequest(format!("invalid form: {e}")))?
    } else {
        json_body(&body)?
    };
    let record = gw.ingest_reason(ReasonSubmission {
        lecture_id: form.lecture_id,
        student_id: form.student_id,
        date: form.date,
        reason_text: form.reason_text,
    })?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}
