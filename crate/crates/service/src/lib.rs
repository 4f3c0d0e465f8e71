//! HTTP API over a directory of registration cases.
//!
//! ```text
//! GET  /v1/cases                                  case summaries
//! GET  /v1/cases/{id}/overlay?tx=&ty=&rz=&ry=     fused overlay PNG, reward in x-reward / x-fg-mean / x-bg-mean
//! GET  /v1/cases/{id}/annotations                 annotation log
//! POST /v1/cases/{id}/annotations                 append {pose, annotator}; reward is recomputed
//! ```
//!
//! Errors are JSON `{"kind": ..., "message": ...}`. Pose query fields default
//! to the case's initial pose. An overlay whose reward is undefined (empty
//! silhouette) is still returned, with status 422 and an `x-error` header.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};
use vesselreg::case::{append_annotation, list_case_dirs, read_annotations, AnnotationRecord, PoseRecord};
use vesselreg::env::fuse_planes;
use vesselreg::geometry::Pose;
use vesselreg::io::encode_png_rgb;
use vesselreg::reward::{overlap_reward, RewardOptions};
use vesselreg::{Error, PoseBounds, RegistrationCase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub id: String,
    /// Volume voxels `[x, y, z]`.
    pub dims: [usize; 3],
    /// DSA `[width, height]`.
    pub image: [usize; 2],
    pub spacing_mm: f64,
    pub has_truth: bool,
    pub initial_pose: PoseRecord,
    pub bounds: PoseBounds,
}

impl CaseSummary {
    fn of(c: &RegistrationCase) -> Self {
        let (w, h) = c.dsa.dims();
        CaseSummary {
            id: c.id.clone(),
            dims: c.volume.dims(),
            image: [w, h],
            spacing_mm: c.spacing(),
            has_truth: c.truth.is_some(),
            initial_pose: c.initial_pose.into(),
            bounds: c.bounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub pose: PoseRecord,
    #[serde(default)]
    pub annotator: String,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
pub struct PoseQuery {
    pub tx: Option<f64>,
    pub ty: Option<f64>,
    pub rz: Option<f64>,
    pub ry: Option<f64>,
}

impl PoseQuery {
    fn resolve(&self, initial: &Pose<f64>) -> Pose<f64> {
        Pose::new(
            self.tx.unwrap_or(initial.t_x),
            self.ty.unwrap_or(initial.t_y),
            self.rz.unwrap_or(initial.r_z),
            self.ry.unwrap_or(initial.r_y),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub kind: String,
    pub message: String,
}

struct Failure(StatusCode, ApiError);

impl Failure {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Failure(
            status,
            ApiError {
                kind: kind.into(),
                message: message.into(),
            },
        )
    }

    fn engine(status: StatusCode, e: &Error) -> Self {
        Failure::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

struct Inner {
    root: PathBuf,
    cases: RwLock<HashMap<String, Arc<RegistrationCase>>>,
    /// Serializes annotation appends per case.
    writers: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

/// Shared service state: the case root and the cases loaded so far.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        AppState(Arc::new(Inner {
            root: root.into(),
            cases: RwLock::new(HashMap::new()),
            writers: Mutex::new(HashMap::new()),
        }))
    }

    pub fn root(&self) -> &Path {
        &self.0.root
    }

    fn case_dir(&self, id: &str) -> Result<PathBuf, Failure> {
        let dirs = list_case_dirs(&self.0.root).map_err(|e| Failure::engine(StatusCode::INTERNAL_SERVER_ERROR, &e))?;
        dirs.into_iter()
            .find(|d| d.file_name().is_some_and(|n| n == id))
            .ok_or_else(|| Failure::new(StatusCode::NOT_FOUND, "NotFound", format!("no case {id}")))
    }

    async fn case(&self, id: &str) -> Result<Arc<RegistrationCase>, Failure> {
        if let Some(c) = self.0.cases.read().await.get(id) {
            return Ok(c.clone());
        }
        let dir = self.case_dir(id)?;
        let c = load_blocking(dir).await?;
        self.0.cases.write().await.insert(id.to_string(), c.clone());
        Ok(c)
    }

    async fn writer(&self, id: &str) -> Arc<Mutex<()>> {
        self.0.writers.lock().await.entry(id.to_string()).or_default().clone()
    }
}

async fn load_blocking(dir: PathBuf) -> Result<Arc<RegistrationCase>, Failure> {
    tokio::task::spawn_blocking(move || RegistrationCase::load(&dir))
        .await
        .map_err(|e| Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
        .map(Arc::new)
        .map_err(|e| Failure::engine(StatusCode::INTERNAL_SERVER_ERROR, &e))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/cases", get(list_cases))
        .route("/v1/cases/{id}/overlay", get(overlay))
        .route("/v1/cases/{id}/annotations", get(list_annotations).post(save_annotation))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, root: PathBuf) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::new(root))).await
}

async fn list_cases(State(st): State<AppState>) -> Result<Json<Vec<CaseSummary>>, Failure> {
    let dirs = list_case_dirs(st.root()).map_err(|e| Failure::engine(StatusCode::INTERNAL_SERVER_ERROR, &e))?;
    let mut out = Vec::with_capacity(dirs.len());
    for d in dirs {
        let id = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.push(CaseSummary::of(&*st.case(&id).await?));
    }
    Ok(Json(out))
}

fn check_pose(case: &RegistrationCase, pose: &Pose<f64>) -> Result<(), Failure> {
    if !pose.is_finite() {
        return Err(Failure::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidArgument", "pose must be finite"));
    }
    if !case.in_bounds(pose) {
        return Err(Failure::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "OutOfBounds",
            format!("pose {pose:?} outside bounds {:?} around {:?}", case.bounds, case.initial_pose),
        ));
    }
    Ok(())
}

fn float_header(v: f64) -> HeaderValue {
    HeaderValue::from_str(&format!("{v:.17e}")).expect("ascii float")
}

async fn overlay(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<PoseQuery>,
) -> Result<Response, Failure> {
    let case = st.case(&id).await?;
    let pose = q.resolve(&case.initial_pose);
    check_pose(&case, &pose)?;
    let rendered = tokio::task::spawn_blocking(move || -> Result<_, Error> {
        let sil = case.silhouette(&pose)?;
        let reward = overlap_reward(&sil, &case.dsa, &RewardOptions::default());
        let png = encode_png_rgb(&fuse_planes(&sil, &case.dsa, 1.0)?)?;
        Ok((png, reward))
    })
    .await
    .map_err(|e| Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
    .map_err(|e| Failure::engine(StatusCode::INTERNAL_SERVER_ERROR, &e))?;
    let (png, reward) = rendered;
    let mut resp = png.into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    match reward {
        Ok(r) => {
            h.insert("x-reward", float_header(r.value));
            h.insert("x-fg-mean", float_header(r.fg_mean));
            h.insert("x-bg-mean", float_header(r.bg_mean));
        }
        Err(e) => {
            h.insert("x-error", HeaderValue::from_static(e.kind()));
            *resp.status_mut() = StatusCode::UNPROCESSABLE_ENTITY;
        }
    }
    Ok(resp)
}

async fn list_annotations(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Vec<AnnotationRecord>>, Failure> {
    let dir = st.case_dir(&id)?;
    read_annotations(&dir)
        .map(Json)
        .map_err(|e| Failure::engine(StatusCode::INTERNAL_SERVER_ERROR, &e))
}

async fn save_annotation(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<AnnotationRequest>,
) -> Result<(StatusCode, Json<AnnotationRecord>), Failure> {
    let dir = st.case_dir(&id)?;
    let case = st.case(&id).await?;
    let pose: Pose<f64> = req.pose.into();
    check_pose(&case, &pose)?;
    let reward = case
        .reward_at(&pose, &RewardOptions::default())
        .map_err(|e| Failure::engine(StatusCode::UNPROCESSABLE_ENTITY, &e))?;
    let rec = AnnotationRecord {
        case_id: id.clone(),
        pose: req.pose,
        reward: reward.value,
        annotator: req.annotator,
        timestamp_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
    };
    let lock = st.writer(&id).await;
    let _guard = lock.lock().await;
    append_annotation(&dir, &rec).map_err(|e| Failure::engine(StatusCode::INTERNAL_SERVER_ERROR, &e))?;
    // the latest annotation is the ground truth from now on
    let mut updated = (*case).clone();
    updated.truth = Some(pose);
    st.0.cases.write().await.insert(id, Arc::new(updated));
    Ok((StatusCode::CREATED, Json(rec)))
}
