//! HTTP endpoints for the annotation workflow, plus optional static UI assets.

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;
use webcurate_core::quality::{AnnotationInput, AnnotationStore, Criteria, QualityError};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] QualityError),
}

pub struct AppState {
    pub store: AnnotationStore,
    /// Relative screenshot paths in the store resolve against this.
    pub base: PathBuf,
}

pub fn router(state: Arc<AppState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/tasks/next", get(next_task))
        .route("/annotations", post(post_annotation))
        .route("/samples/{id}/screenshot", get(screenshot))
        .route("/reports/consistency", get(consistency))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { error(StatusCode::NOT_FOUND, "no such route") }),
    }
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

fn store_error(e: QualityError) -> Response {
    match e {
        QualityError::NotFound(_) => error(StatusCode::NOT_FOUND, e.to_string()),
        QualityError::Unregistered(_) => error(StatusCode::BAD_REQUEST, e.to_string()),
        _ => {
            log::error!("{e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, "annotation store failure")
        }
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
    group: Option<u32>,
}

/// Registers the annotator on first contact, then hands out their next
/// unscored sample, or 204 when there is none.
async fn next_task(State(st): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Response {
    let Some(annotator) = q.annotator.filter(|a| !a.trim().is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "missing annotator parameter");
    };
    let res = tokio::task::spawn_blocking(move || {
        let group = st.store.register_annotator(&annotator, q.group)?;
        Ok::<_, QualityError>((group, st.store.next_task(&annotator)?))
    })
    .await
    .expect("store task");
    match res {
        Ok((group, Some(id))) => Json(json!({
            "sample_id": id,
            "screenshot_url": format!("/samples/{id}/screenshot"),
            "group_id": group,
        }))
        .into_response(),
        Ok((_, None)) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => store_error(e),
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CriteriaBody {
    List([bool; 5]),
    Named(Criteria),
}

#[derive(Deserialize)]
struct AnnotationBody {
    sample_id: String,
    annotator_id: String,
    criteria: CriteriaBody,
    /// Accepted for compatibility and ignored; the server recomputes it.
    #[serde(default)]
    #[allow(dead_code)]
    score: Option<u8>,
}

fn now() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// Upsert keyed by (sample, annotator). Unknown annotators are registered.
async fn post_annotation(
    State(st): State<Arc<AppState>>,
    body: Result<Json<AnnotationBody>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let criteria = match body.criteria {
        CriteriaBody::List(v) => Criteria::from_array(v),
        CriteriaBody::Named(c) => c,
    };
    let input = AnnotationInput {
        sample_id: body.sample_id,
        annotator_id: body.annotator_id,
        criteria,
        score: None,
    };
    let res = tokio::task::spawn_blocking(move || {
        if !st.store.has_sample(&input.sample_id) {
            return Err(QualityError::NotFound(input.sample_id));
        }
        st.store.register_annotator(&input.annotator_id, None)?;
        st.store.record_annotation(input, now())
    })
    .await
    .expect("store task");
    match res {
        Ok(a) => Json(a).into_response(),
        Err(e) => store_error(e),
    }
}

async fn screenshot(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(rel) = st.store.screenshot_path(&id) else {
        return error(StatusCode::NOT_FOUND, format!("no screenshot for {id}"));
    };
    match tokio::fs::read(st.base.join(rel)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, format!("screenshot for {id} is missing on disk")),
    }
}

async fn consistency(State(st): State<Arc<AppState>>) -> Response {
    Json(st.store.consistency_report()).into_response()
}

pub async fn bind(addr: SocketAddr) -> Result<TcpListener, ServeError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })
}

/// Serves until `shutdown` resolves, then flushes the store.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    ui_dir: Option<PathBuf>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let app = router(state.clone(), ui_dir);
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    state.store.flush()?;
    Ok(())
}
