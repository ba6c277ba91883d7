//! Session API for interactive layer planning.
//!
//! Routes, all under `/api/v1`:
//!
//! | method | path | body / query |
//! |---|---|---|
//! | POST | `/sessions` | |
//! | GET, DELETE | `/sessions/{id}` | |
//! | GET, PUT | `/sessions/{id}/mesh` | [`MeshPayload`] |
//! | GET, POST | `/sessions/{id}/anchors` | [`AnchorRequest`] |
//! | DELETE | `/sessions/{id}/anchors/{tet}` | `?expected_revision=` |
//! | POST | `/sessions/{id}/solve` | `PlanConfig` |
//! | GET | `/sessions/{id}/job` | |
//! | GET | `/sessions/{id}/progress` | `?since=` |
//! | GET | `/sessions/{id}/ws` | WebSocket, `?since=` |
//! | GET | `/sessions/{id}/layers` | `?start=&end=` |
//! | GET | `/sessions/{id}/field` | `?stride=` |
//! | GET | `/sessions/{id}/reports` | |
//! | POST | `/sessions/{id}/save` | [`SaveRequest`] |

pub mod error;
pub mod payload;
pub mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use peel_core::planner::PlanConfig;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;
use uuid::Uuid;

pub use error::ApiError;
pub use payload::*;
pub use session::{Session, Sessions};

/// Default request body limit.
pub const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

#[derive(Clone, Default)]
pub struct AppState {
    pub sessions: Arc<Sessions>,
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/:id", get(get_session).delete(delete_session))
        .route("/sessions/:id/mesh", get(get_mesh).put(put_mesh))
        .route("/sessions/:id/anchors", get(get_anchors).post(put_anchor))
        .route("/sessions/:id/anchors/:tet", delete(delete_anchor))
        .route("/sessions/:id/solve", post(solve))
        .route("/sessions/:id/job", get(get_job))
        .route("/sessions/:id/progress", get(get_progress))
        .route("/sessions/:id/ws", get(ws))
        .route("/sessions/:id/layers", get(get_layers))
        .route("/sessions/:id/field", get(get_field))
        .route("/sessions/:id/reports", get(get_reports))
        .route("/sessions/:id/save", post(save));
    Router::new()
        .nest("/api/v1", api)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Router that also serves a static client from `ui_dir`.
pub fn router_with_ui(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let r = router(state);
    match ui_dir {
        Some(dir) => r.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => r,
    }
}

pub async fn serve(addr: SocketAddr, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router_with_ui(AppState::default(), ui_dir)).await
}

type ApiResult<T> = Result<T, ApiError>;

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

#[derive(Serialize)]
struct SessionInfo {
    id: Uuid,
    revision: u64,
    mesh: Option<MeshSummary>,
    anchors: usize,
    job: JobInfo,
}

fn session_info(s: &Session) -> SessionInfo {
    let snap = s.snapshot();
    SessionInfo {
        id: s.id,
        revision: snap.revision,
        mesh: snap.summary.clone(),
        anchors: snap.anchors.len(),
        job: snap.job.clone(),
    }
}

async fn create_session(State(st): State<AppState>) -> impl IntoResponse {
    (StatusCode::CREATED, Json(session_info(&st.sessions.create())))
}

async fn list_sessions(State(st): State<AppState>) -> Json<Vec<Uuid>> {
    Json(st.sessions.ids())
}

async fn get_session(State(st): State<AppState>, Path(id): Path<Uuid>) -> ApiResult<Json<SessionInfo>> {
    let s = st.sessions.get(id)?;
    Ok(Json(session_info(&s)))
}

async fn delete_session(State(st): State<AppState>, Path(id): Path<Uuid>) -> ApiResult<StatusCode> {
    st.sessions.remove(id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_mesh(State(st): State<AppState>, Path(id): Path<Uuid>) -> ApiResult<Json<MeshResponse>> {
    let snap = st.sessions.get(id)?.snapshot();
    let summary = snap.summary.clone().ok_or(ApiError::NoMesh)?;
    Ok(Json(MeshResponse { revision: snap.revision, summary }))
}

async fn put_mesh(
    State(st): State<AppState>,
    Path(id): Path<Uuid>,
    Json(body): Json<MeshPayload>,
) -> ApiResult<Json<MeshResponse>> {
    let s = st.sessions.get(id)?;
    let mesh = tokio::task::spawn_blocking(move || body.build())
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    let snap = s.set_mesh(mesh)?;
    Ok(Json(MeshResponse { revision: snap.revision, summary: snap.summary.clone().expect("just set") }))
}

async fn get_anchors(State(st): State<AppState>, Path(id): Path<Uuid>) -> ApiResult<Json<AnchorList>> {
    let snap = st.sessions.get(id)?.snapshot();
    Ok(Json(AnchorList { revision: snap.revision, anchors: snap.anchors.iter().copied().collect(), queued: snap.queued }))
}

async fn put_anchor(
    State(st): State<AppState>,
    Path(id): Path<Uuid>,
    Json(body): Json<AnchorRequest>,
) -> ApiResult<Json<RevisionResponse>> {
    let (revision, queued) = st.sessions.get(id)?.put_anchor(body.anchor(), body.expected_revision)?;
    Ok(Json(RevisionResponse { revision, queued }))
}

#[derive(Deserialize)]
struct RevisionQuery {
    expected_revision: Option<u64>,
}

async fn delete_anchor(
    State(st): State<AppState>,
    Path((id, tet)): Path<(Uuid, usize)>,
    Query(q): Query<RevisionQuery>,
) -> ApiResult<Json<RevisionResponse>> {
    let (revision, queued) = st.sessions.get(id)?.delete_anchor(tet, q.expected_revision)?;
    Ok(Json(RevisionResponse { revision, queued }))
}

async fn solve(
    State(st): State<AppState>,
    Path(id): Path<Uuid>,
    body: Option<Json<PlanConfig>>,
) -> ApiResult<impl IntoResponse> {
    let cfg = body.map(|Json(c)| c).unwrap_or_default();
    let (job, revision) = st.sessions.get(id)?.start_solve(cfg)?;
    Ok((StatusCode::ACCEPTED, Json(SolveResponse { job, revision })))
}

async fn get_job(State(st): State<AppState>, Path(id): Path<Uuid>) -> ApiResult<Json<JobInfo>> {
    Ok(Json(st.sessions.get(id)?.snapshot().job.clone()))
}

#[derive(Deserialize)]
struct SinceQuery {
    #[serde(default)]
    since: u64,
}

async fn get_progress(
    State(st): State<AppState>,
    Path(id): Path<Uuid>,
    Query(q): Query<SinceQuery>,
) -> ApiResult<Json<Vec<JobEvent>>> {
    Ok(Json(st.sessions.get(id)?.events_since(q.since)))
}

async fn ws(
    State(st): State<AppState>,
    Path(id): Path<Uuid>,
    Query(q): Query<SinceQuery>,
    upgrade: WebSocketUpgrade,
) -> ApiResult<Response> {
    let s = st.sessions.get(id)?;
    Ok(upgrade.on_upgrade(move |socket| stream_events(socket, s, q.since)))
}

/// Sends the backlog after `since`, then live events, one JSON text
/// message each. A lagging receiver is caught up from the history.
async fn stream_events(mut socket: WebSocket, s: Arc<Session>, since: u64) {
    let (backlog, mut rx) = s.subscribe(since);
    let mut last = since;
    let send = |ev: &JobEvent| Message::Text(serde_json::to_string(ev).expect("event serializes"));
    for ev in &backlog {
        if socket.send(send(ev)).await.is_err() {
            return;
        }
        last = ev.seq();
    }
    loop {
        tokio::select! {
            ev = rx.recv() => {
                let batch = match ev {
                    Ok(ev) => vec![ev],
                    Err(RecvError::Lagged(_)) => s.events_since(last),
                    Err(RecvError::Closed) => return,
                };
                for ev in batch {
                    if ev.seq() <= last {
                        continue;
                    }
                    if socket.send(send(&ev)).await.is_err() {
                        return;
                    }
                    last = ev.seq();
                }
            }
            msg = socket.recv() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            }
        }
    }
}

#[derive(Deserialize)]
struct RangeQuery {
    start: Option<usize>,
    end: Option<usize>,
}

async fn get_layers(
    State(st): State<AppState>,
    Path(id): Path<Uuid>,
    Query(q): Query<RangeQuery>,
) -> ApiResult<Json<LayersResponse>> {
    let plan = st.sessions.get(id)?.snapshot().plan.clone().ok_or(ApiError::NoPlan)?;
    let total = plan.layers.len();
    let end = q.end.unwrap_or(total).min(total);
    let start = q.start.unwrap_or(0).min(end);
    Ok(Json(LayersResponse { revision: plan.revision, total, layers: plan.layers[start..end].to_vec() }))
}

#[derive(Deserialize)]
struct StrideQuery {
    stride: Option<usize>,
}

async fn get_field(
    State(st): State<AppState>,
    Path(id): Path<Uuid>,
    Query(q): Query<StrideQuery>,
) -> ApiResult<Json<FieldSample>> {
    let snap = st.sessions.get(id)?.snapshot();
    let plan = snap.plan.clone().ok_or(ApiError::NoPlan)?;
    let mesh = snap.mesh.clone().ok_or(ApiError::NoMesh)?;
    let stride = q.stride.unwrap_or(1).max(1);
    Ok(Json(FieldSample::of(&mesh, &plan.plan.field, stride, plan.revision)))
}

async fn get_reports(State(st): State<AppState>, Path(id): Path<Uuid>) -> ApiResult<Response> {
    let plan = st.sessions.get(id)?.snapshot().plan.clone().ok_or(ApiError::NoPlan)?;
    Ok(json_bytes(plan.reports.clone()))
}

#[derive(Serialize)]
struct SaveResponse {
    files: Vec<PathBuf>,
}

async fn save(
    State(st): State<AppState>,
    Path(id): Path<Uuid>,
    Json(body): Json<SaveRequest>,
) -> ApiResult<Json<SaveResponse>> {
    let s = st.sessions.get(id)?;
    let files = tokio::task::spawn_blocking(move || s.save(&body.dir))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(SaveResponse { files }))
}
