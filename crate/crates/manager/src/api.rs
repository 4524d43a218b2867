//! REST front end.
//!
//! - `POST /evaluations` multipart with `archive` (file), `plan` (JSON) and
//!   optional `nodes` (JSON list) → `{"id": ...}`
//! - `GET /evaluations/{id}` → `{"id", "state", "position"?, "error"?}`
//! - `GET /evaluations/{id}/results` → tar.gz of the results directory
//! - `GET /cleanup`, `POST /cleanup/ack` → dispatch block after a failed
//!   cleanup

use std::io;
use std::net::SocketAddr;
use std::thread;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use comet_agent::archive::pack_dir;
use comet_core::{NodeDescriptor, TestPlan};
use serde_json::json;

use crate::manager::Manager;

const MAX_UPLOAD: usize = 512 << 20;

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

pub fn router(manager: Manager) -> Router {
    Router::new()
        .route("/evaluations", post(submit))
        .route("/evaluations/{id}", get(status))
        .route("/evaluations/{id}/results", get(results))
        .route("/cleanup", get(cleanup))
        .route("/cleanup/ack", post(ack))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(manager)
}

async fn submit(State(m): State<Manager>, mut form: Multipart) -> Response {
    let mut archive: Option<Bytes> = None;
    let mut plan: Option<TestPlan> = None;
    let mut nodes: Option<Vec<NodeDescriptor>> = None;
    loop {
        let field = match form.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return error(StatusCode::BAD_REQUEST, format!("multipart: {e}")),
        };
        let name = field.name().unwrap_or_default().to_string();
        let data = match field.bytes().await {
            Ok(d) => d,
            Err(e) => return error(StatusCode::BAD_REQUEST, format!("field {name}: {e}")),
        };
        match name.as_str() {
            "archive" => archive = Some(data),
            "plan" => match serde_json::from_slice(&data) {
                Ok(p) => plan = Some(p),
                Err(e) => return error(StatusCode::BAD_REQUEST, format!("plan: {e}")),
            },
            "nodes" => match serde_json::from_slice(&data) {
                Ok(n) => nodes = Some(n),
                Err(e) => return error(StatusCode::BAD_REQUEST, format!("nodes: {e}")),
            },
            other => return error(StatusCode::BAD_REQUEST, format!("unexpected field {other:?}")),
        }
    }
    let Some(plan) = plan else {
        return error(StatusCode::BAD_REQUEST, "missing plan field");
    };
    let archive = archive.map(|b| b.to_vec()).unwrap_or_default();
    let outcome = tokio::task::spawn_blocking(move || m.submit(archive, plan, nodes)).await;
    match outcome {
        Ok(Ok(id)) => (StatusCode::CREATED, Json(json!({ "id": id }))).into_response(),
        Ok(Err(e)) => (
            StatusCode::BAD_REQUEST,
            Json(json!({ "error": e.to_string(), "violations": e.violations() })),
        )
            .into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn status(State(m): State<Manager>, Path(id): Path<String>) -> Response {
    match m.status(&id) {
        Some(s) => Json(s).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no such evaluation: {id}")),
    }
}

async fn results(State(m): State<Manager>, Path(id): Path<String>) -> Response {
    let Some(status) = m.status(&id) else {
        return error(StatusCode::NOT_FOUND, format!("no such evaluation: {id}"));
    };
    let Some(dir) = m.results_dir(&id) else {
        return error(
            StatusCode::CONFLICT,
            format!("{id} is {}; results are available once it finishes", status.state),
        );
    };
    match tokio::task::spawn_blocking(move || pack_dir(&dir)).await {
        Ok(Ok(bytes)) => (
            [
                (header::CONTENT_TYPE, "application/gzip".to_string()),
                (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{id}.tar.gz\"")),
            ],
            bytes,
        )
            .into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn cleanup(State(m): State<Manager>) -> Response {
    Json(json!({ "blocked": m.cleanup_blocked() })).into_response()
}

async fn ack(State(m): State<Manager>) -> Response {
    Json(json!({ "acknowledged": m.ack_cleanup() })).into_response()
}

pub async fn serve(listener: tokio::net::TcpListener, manager: Manager) -> io::Result<()> {
    axum::serve(listener, router(manager)).await
}

/// Serves the API from a background thread with its own runtime.
pub fn spawn_server(manager: Manager, bind: &str) -> io::Result<(SocketAddr, thread::JoinHandle<io::Result<()>>)> {
    let std_listener = std::net::TcpListener::bind(bind)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let handle = thread::Builder::new().name("api".into()).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener)?;
            serve(listener, manager).await
        })
    })?;
    Ok((addr, handle))
}
