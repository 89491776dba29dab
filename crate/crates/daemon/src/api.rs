//! HTTP control API.
//!
//! | method | path                                          | body                  |
//! |--------|-----------------------------------------------|-----------------------|
//! | GET    | `/v1/health`                                  |                       |
//! | GET    | `/v1/counters`                                |                       |
//! | GET    | `/v1/tables`                                  |                       |
//! | GET    | `/v1/instances/{i}`                           |                       |
//! | GET    | `/v1/instances/{i}/members`                   |                       |
//! | GET    | `/v1/instances/{i}/slot-usage`                |                       |
//! | PUT    | `/v1/instances/{i}/members`                   | `MembersRequest`      |
//! | POST   | `/v1/instances/{i}/epochs`                    | `EpochPlanRequest`    |
//! | POST   | `/v1/instances/{i}/epochs/{e}/cleanup`        |                       |
//! | POST   | `/v1/instances/{i}/feedback`                  | `FeedbackRequest`     |
//! | POST   | `/v1/instances/{i}/rebalance`                 | `BoundaryRequest`     |
//!
//! Bodies and responses are JSON. Errors come back as
//! `{"error": <code>, "message": <text>}` with a 4xx status.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ejfat_core::control::{
    ActivationSummary, ControlError, ControlPlane, EpochPlanRequest, FeedbackReport, MemberSpec,
};
use ejfat_core::pipeline::{
    CounterSnapshot, EpochId, EventRange, InstanceId, MemberId, PipelineTables, SlotUsageReport,
    TableFootprint,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::forward::{DataPlane, ForwardingStats};

pub struct ApiState {
    pub control: Mutex<ControlPlane>,
    pub plane: Arc<DataPlane>,
    pub started: Instant,
    pub headroom: u64,
    pub state_file: Option<PathBuf>,
}

impl ApiState {
    pub fn now(&self) -> Duration {
        self.started.elapsed()
    }

    /// Boundary used when a request names none: the highest event seen
    /// (or the current epoch start) plus the configured headroom.
    fn default_boundary(&self, cp: &ControlPlane, instance: InstanceId) -> Result<u64, ControlError> {
        let state = cp
            .tables()
            .instance(instance)
            .ok_or(ControlError::NotInitialized(instance))?;
        let base = self
            .plane
            .max_event(instance.index())
            .unwrap_or(0)
            .max(state.current_start());
        Ok(base.saturating_add(self.headroom))
    }

    /// Rejects boundaries the traffic has already reached: packets of
    /// that event may have gone to the old epoch.
    fn check_boundary(&self, instance: InstanceId, boundary: u64) -> Result<(), ApiError> {
        match self.plane.max_event(instance.index()) {
            Some(seen) if boundary <= seen => Err(ApiError::new(
                StatusCode::CONFLICT,
                "BoundaryPassed",
                format!("boundary {boundary} is not after the highest forwarded event {seen}"),
            )),
            _ => Ok(()),
        }
    }

    /// Writes the current tables to the state file, if configured.
    pub fn persist(&self, tables: &PipelineTables) {
        let Some(path) = &self.state_file else { return };
        let tmp = path.with_extension("tmp");
        let json = serde_json::to_vec_pretty(tables).expect("tables serialize");
        let res = std::fs::write(&tmp, json).and_then(|_| std::fs::rename(&tmp, path));
        if let Err(e) = res {
            tracing::error!("saving tables to {}: {e}", path.display());
        }
    }

    /// Runs `f` as the single writer, persisting afterwards if the tables
    /// changed.
    fn mutate<R>(&self, f: impl FnOnce(&mut ControlPlane) -> Result<R, ApiError>) -> Result<R, ApiError> {
        let mut cp = self.control.lock().expect("control plane poisoned");
        let before = cp.publications();
        let out = f(&mut cp);
        if cp.publications() != before {
            self.persist(cp.tables());
        }
        out
    }

    /// Retires every epoch whose quiesce delay has passed.
    pub fn cleanup_due(&self) {
        let now = self.now();
        let _ = self.mutate(|cp| {
            for (instance, epoch) in cp.cleanup_due(now) {
                match cp.cleanup(instance, epoch, now) {
                    Ok(()) => tracing::info!("{instance}: cleaned up {epoch}"),
                    Err(e) => tracing::warn!("{instance}: cleanup of {epoch} failed: {e}"),
                }
            }
            Ok(())
        });
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.into(),
            message: message.into(),
        }
    }
}

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        use ControlError::*;
        let status = match &e {
            NotInitialized(_) | UnknownEpoch(_) | UnknownMember(_) => StatusCode::NOT_FOUND,
            EpochReuse(_) | EpochStillCurrent(_) | AlreadyInitialized(_) | QuiesceNotElapsed { .. }
            | RewriteConflict(_) | BoundaryNotFuture { .. } => StatusCode::CONFLICT,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared = State<Arc<ApiState>>;

fn instance(raw: u8) -> Result<InstanceId, ApiError> {
    InstanceId::new(raw).map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "UnknownInstance", e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountersResponse {
    pub pipeline: CounterSnapshot,
    pub forwarding: ForwardingStats,
    /// Highest forwarded event per configured instance.
    pub max_event: Vec<Option<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceResponse {
    pub instance: InstanceId,
    pub current_epoch: EpochId,
    pub current_start: u64,
    pub retired: Vec<(EpochId, EventRange)>,
    pub calendars: Vec<(EpochId, Vec<(MemberId, usize)>)>,
    pub members: Vec<MemberSpec>,
    pub footprint: TableFootprint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChangeResponse {
    pub summary: ActivationSummary,
    pub footprint: TableFootprint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MembersRequest {
    pub members: Vec<MemberSpec>,
    #[serde(default)]
    pub boundary_event: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BoundaryRequest {
    #[serde(default)]
    pub boundary_event: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub member: MemberId,
    pub fill_level: f64,
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

async fn counters(State(s): Shared) -> Json<CountersResponse> {
    let cp = s.control.lock().expect("control plane poisoned");
    let max_event = cp
        .tables()
        .configured_instances()
        .map(|i| s.plane.max_event(i.index()))
        .collect();
    drop(cp);
    Json(CountersResponse {
        pipeline: s.plane.counters.snapshot(),
        forwarding: s.plane.stats(),
        max_event,
    })
}

async fn tables(State(s): Shared) -> Json<PipelineTables> {
    let cp = s.control.lock().expect("control plane poisoned");
    Json(PipelineTables::clone(cp.tables()))
}

async fn get_instance(State(s): Shared, Path(raw): Path<u8>) -> ApiResult<InstanceResponse> {
    let id = instance(raw)?;
    let cp = s.control.lock().expect("control plane poisoned");
    let t = cp.tables();
    let st = t.instance(id).ok_or(ControlError::NotInitialized(id))?;
    Ok(Json(InstanceResponse {
        instance: id,
        current_epoch: st.current(),
        current_start: st.current_start(),
        retired: st.retired().iter().map(|(e, r)| (*e, *r)).collect(),
        calendars: t
            .calendars(id)
            .into_iter()
            .map(|(e, c)| (e, c.members().into_iter().map(|m| (m, c.count(m))).collect()))
            .collect(),
        members: cp.members(id),
        footprint: t.footprint(),
    }))
}

async fn get_members(State(s): Shared, Path(raw): Path<u8>) -> ApiResult<Vec<MemberSpec>> {
    let id = instance(raw)?;
    let cp = s.control.lock().expect("control plane poisoned");
    cp.tables().instance(id).ok_or(ControlError::NotInitialized(id))?;
    Ok(Json(cp.members(id)))
}

async fn slot_usage(State(s): Shared, Path(raw): Path<u8>) -> ApiResult<SlotUsageReport> {
    let id = instance(raw)?;
    Ok(Json(s.plane.slot_usage[id.index()].snapshot()))
}

/// Replaces the member set: initializes the instance if it has never been
/// set up, otherwise activates a new epoch.
async fn put_members(
    State(s): Shared,
    Path(raw): Path<u8>,
    Json(req): Json<MembersRequest>,
) -> Result<Response, ApiError> {
    let id = instance(raw)?;
    let now = s.now();
    s.mutate(|cp| {
        if cp.tables().instance(id).is_none() {
            let epoch = cp.initialize_instance(id, &req.members)?;
            return Ok((StatusCode::CREATED, Json(json!({"instance": id, "epoch": epoch}))).into_response());
        }
        let boundary = match req.boundary_event {
            Some(b) => b,
            None => s.default_boundary(cp, id)?,
        };
        s.check_boundary(id, boundary)?;
        let plan = cp.plan_epoch(id, boundary, req.members.clone())?;
        let summary = cp.activate(&plan, now)?;
        tracing::info!("{id}: {} from event {}", summary.epoch, summary.boundary_event);
        Ok(Json(ChangeResponse {
            summary,
            footprint: cp.tables().footprint(),
        })
        .into_response())
    })
}

async fn post_epoch(
    State(s): Shared,
    Path(raw): Path<u8>,
    Json(mut req): Json<EpochPlanRequest>,
) -> ApiResult<ChangeResponse> {
    let id = instance(raw)?;
    req.instance = id;
    let now = s.now();
    s.mutate(|cp| {
        let boundary = s.default_boundary(cp, id)?;
        let plan = req.resolve(cp, boundary)?;
        s.check_boundary(id, plan.boundary_event)?;
        let summary = cp.activate(&plan, now)?;
        tracing::info!("{id}: {} from event {}", summary.epoch, summary.boundary_event);
        Ok(Json(ChangeResponse {
            summary,
            footprint: cp.tables().footprint(),
        }))
    })
}

async fn post_cleanup(
    State(s): Shared,
    Path((raw, epoch)): Path<(u8, u32)>,
) -> ApiResult<serde_json::Value> {
    let id = instance(raw)?;
    let now = s.now();
    s.mutate(|cp| {
        cp.cleanup(id, EpochId(epoch), now)?;
        Ok(Json(json!({"instance": id, "removed": EpochId(epoch), "footprint": cp.tables().footprint()})))
    })
}

async fn post_feedback(
    State(s): Shared,
    Path(raw): Path<u8>,
    Json(req): Json<FeedbackRequest>,
) -> ApiResult<serde_json::Value> {
    let id = instance(raw)?;
    let now = s.now();
    let mut cp = s.control.lock().expect("control plane poisoned");
    cp.submit_feedback(
        id,
        FeedbackReport {
            member: req.member,
            fill_level: req.fill_level,
            timestamp: now,
        },
    )?;
    let proposed = cp.proposed_weights(id, now)?;
    Ok(Json(json!({"accepted": true, "proposed_weights": proposed})))
}

async fn post_rebalance(
    State(s): Shared,
    Path(raw): Path<u8>,
    body: Option<Json<BoundaryRequest>>,
) -> ApiResult<ChangeResponse> {
    let id = instance(raw)?;
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let now = s.now();
    s.mutate(|cp| {
        let boundary = match req.boundary_event {
            Some(b) => b,
            None => s.default_boundary(cp, id)?,
        };
        s.check_boundary(id, boundary)?;
        let summary = cp.rebalance(id, boundary, now)?;
        Ok(Json(ChangeResponse {
            summary,
            footprint: cp.tables().footprint(),
        }))
    })
}

pub fn router(state: Arc<ApiState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/counters", get(counters))
        .route("/v1/tables", get(tables))
        .route("/v1/instances/{i}", get(get_instance))
        .route("/v1/instances/{i}/members", get(get_members).put(put_members))
        .route("/v1/instances/{i}/slot-usage", get(slot_usage))
        .route("/v1/instances/{i}/epochs", post(post_epoch))
        .route("/v1/instances/{i}/epochs/{e}/cleanup", post(post_cleanup))
        .route("/v1/instances/{i}/feedback", post(post_feedback))
        .route("/v1/instances/{i}/rebalance", post(post_rebalance))
        .with_state(state)
}
