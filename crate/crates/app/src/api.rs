//! HTTP API over the service.
//!
//! JSON in, JSON out. Errors carry `{"error": code, "message": ...}`. The
//! feed is a long-lived response of newline-delimited envelopes; `/events`
//! returns the same envelopes as a JSON array for polling clients.

use std::collections::BTreeSet;
use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use futures::StreamExt;
use routecoach_core::geo::GpsFix;
use routecoach_core::ids::{PoiId, RouteId, SessionId, WayId};
use routecoach_core::payload::Modality;
use routecoach_core::route::Way;
use serde::Deserialize;
use serde_json::json;

use crate::service::{
    default_modalities, ArRequest, AssistRequest, BeginRequest, ConsentRequest, CreateRouteRequest, EditsRequest,
    EndRequest, ErwFinishRequest, ErwStartRequest, HelpRequest, NegotiationStartRequest, PackageRequest,
    PoiCaptureRequest, QuizRequest, ReopenRequest, ReportRequest, Service, ServiceError, SignalCheckRequest,
    SimulateRequest, StepRequest,
};

type AppState = Arc<Service>;
type ApiResult = Result<Response, ServiceError>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": self.code(), "message": self.to_string() }))).into_response()
    }
}

/// Role resolved from the bearer token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Trainer,
    User,
}

impl Role {
    fn trainer(self) -> Result<(), ServiceError> {
        match self {
            Role::Trainer => Ok(()),
            Role::User => Err(ServiceError::Forbidden {
                code: "trainer-only",
                message: "this operation needs the trainer role".into(),
            }),
        }
    }
}

async fn authenticate(State(svc): State<AppState>, mut req: Request, next: Next) -> Response {
    let role = match &svc.config().auth {
        None => Some(Role::Trainer),
        Some(tokens) => {
            let bearer = req
                .headers()
                .get(header::AUTHORIZATION)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.strip_prefix("Bearer "));
            match bearer {
                Some(t) if t == tokens.trainer_token => Some(Role::Trainer),
                Some(t) if t == tokens.user_token => Some(Role::User),
                _ => None,
            }
        }
    };
    match role {
        Some(role) => {
            req.extensions_mut().insert(role);
            next.run(req).await
        }
        None => ServiceError::Unauthorized.into_response(),
    }
}

fn ok<T: serde::Serialize>(value: T) -> ApiResult {
    Ok(Json(value).into_response())
}

fn created<T: serde::Serialize>(value: T) -> ApiResult {
    Ok((StatusCode::CREATED, Json(value)).into_response())
}

pub fn router(svc: AppState) -> Router {
    Router::new()
        .route("/ways", post(create_way))
        .route("/ways/{id}", get(get_way))
        .route("/ways/{id}/trend", get(trend))
        .route("/erw/{key}", get(get_erw))
        .route("/erw/{key}/start", post(erw_start))
        .route("/erw/{key}/fix", post(erw_fix))
        .route("/erw/{key}/poi", post(erw_poi))
        .route("/erw/{key}/finish", post(erw_finish))
        .route("/erw/{key}/package", post(erw_package))
        .route("/erw/{key}/playback", get(erw_playback))
        .route("/routes", post(create_route))
        .route("/routes/{id}", get(get_route))
        .route("/routes/{id}/edits", post(route_edits))
        .route("/routes/{id}/reopen", post(route_reopen))
        .route("/routes/{id}/pois/{poi}/preview", get(preview))
        .route("/routes/{id}/simulate", post(simulate))
        .route("/negotiations/{route}", post(negotiation_start).get(negotiation_get))
        .route("/negotiations/{route}/step", post(negotiation_step))
        .route("/negotiations/{route}/finalize", post(negotiation_finalize))
        .route("/consents", post(grant_consent))
        .route("/sessions", post(begin))
        .route("/sessions/{id}/fix", post(session_fix))
        .route("/sessions/{id}/quiz", post(session_quiz))
        .route("/sessions/{id}/report", post(session_report))
        .route("/sessions/{id}/help", post(session_help))
        .route("/sessions/{id}/assist", post(session_assist))
        .route("/sessions/{id}/ar", post(session_ar))
        .route("/sessions/{id}/signal", post(session_signal))
        .route("/sessions/{id}/end", post(session_end))
        .route("/sessions/{id}/snapshot", get(session_snapshot))
        .route("/sessions/{id}/feed", get(feed))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/indicators", get(indicators))
        .layer(middleware::from_fn_with_state(svc.clone(), authenticate))
        .with_state(svc)
}

// ---------------------------------------------------------------------------
// Ways and walks

async fn create_way(State(svc): State<AppState>, Extension(role): Extension<Role>, Json(way): Json<Way>) -> ApiResult {
    role.trainer()?;
    created(svc.create_way(way)?)
}

async fn get_way(State(svc): State<AppState>, Path(id): Path<WayId>) -> ApiResult {
    ok(svc.way(&id)?)
}

async fn trend(State(svc): State<AppState>, Extension(role): Extension<Role>, Path(id): Path<WayId>) -> ApiResult {
    role.trainer()?;
    ok(svc.trend(&id)?)
}

async fn get_erw(State(svc): State<AppState>, Extension(role): Extension<Role>, Path(key): Path<String>) -> ApiResult {
    role.trainer()?;
    ok(svc.erw(&key)?)
}

async fn erw_start(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Path(key): Path<WayId>,
    Json(req): Json<ErwStartRequest>,
) -> ApiResult {
    role.trainer()?;
    created(svc.erw_start(&key, req)?)
}

async fn erw_fix(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Path(key): Path<String>,
    Json(fix): Json<GpsFix>,
) -> ApiResult {
    role.trainer()?;
    ok(json!({ "fix_count": svc.erw_fix(&key, fix)? }))
}

async fn erw_poi(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Path(key): Path<String>,
    Json(req): Json<PoiCaptureRequest>,
) -> ApiResult {
    role.trainer()?;
    created(json!({ "poi_id": svc.erw_poi(&key, req)? }))
}

async fn erw_finish(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Path(key): Path<String>,
    body: Option<Json<ErwFinishRequest>>,
) -> ApiResult {
    role.trainer()?;
    ok(svc.erw_finish(&key, body.map(|b| b.0).unwrap_or_default())?)
}

async fn erw_package(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Path(key): Path<String>,
    Json(req): Json<PackageRequest>,
) -> ApiResult {
    role.trainer()?;
    ok(svc.erw_package(&key, req)?)
}

async fn erw_playback(State(svc): State<AppState>, Extension(role): Extension<Role>, Path(key): Path<String>) -> ApiResult {
    role.trainer()?;
    ok(svc.erw_playback(&key)?)
}

// ---------------------------------------------------------------------------
// Routes and negotiation

#[derive(Debug, Deserialize)]
struct VersionQuery {
    version: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct ModalityQuery {
    /// Comma-separated, e.g. `text,symbol`.
    modalities: Option<String>,
}

fn parse_modalities(raw: Option<&str>) -> Result<BTreeSet<Modality>, ServiceError> {
    let Some(raw) = raw else {
        return Ok(default_modalities());
    };
    raw.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            serde_json::from_value(json!(s.trim())).map_err(|_| ServiceError::Rejected {
                code: "bad-modality",
                message: format!("unknown modality `{s}`"),
            })
        })
        .collect()
}

async fn create_route(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Json(req): Json<CreateRouteRequest>,
) -> ApiResult {
    role.trainer()?;
    created(svc.create_route(req)?)
}

async fn get_route(State(svc): State<AppState>, Path(id): Path<RouteId>, Query(q): Query<VersionQuery>) -> ApiResult {
    ok(svc.route(&id, q.version)?)
}

async fn route_edits(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Path(id): Path<RouteId>,
    Json(req): Json<EditsRequest>,
) -> ApiResult {
    role.trainer()?;
    ok(svc.route_edits(&id, req)?)
}

async fn route_reopen(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Path(id): Path<RouteId>,
    Json(req): Json<ReopenRequest>,
) -> ApiResult {
    role.trainer()?;
    ok(svc.route_reopen(&id, req)?)
}

async fn preview(
    State(svc): State<AppState>,
    Path((id, poi)): Path<(RouteId, PoiId)>,
    Query(q): Query<ModalityQuery>,
) -> ApiResult {
    let modalities = parse_modalities(q.modalities.as_deref())?;
    ok(svc.preview(&id, &poi, &modalities)?)
}

async fn simulate(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Path(id): Path<RouteId>,
    Json(req): Json<SimulateRequest>,
) -> ApiResult {
    role.trainer()?;
    let svc = svc.clone();
    let record = tokio::task::spawn_blocking(move || svc.simulate(&id, req))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    created(record)
}

async fn negotiation_start(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Path(route): Path<RouteId>,
    body: Option<Json<NegotiationStartRequest>>,
) -> ApiResult {
    role.trainer()?;
    created(svc.negotiation_start(&route, body.map(|b| b.0).unwrap_or_default())?)
}

async fn negotiation_get(State(svc): State<AppState>, Extension(role): Extension<Role>, Path(route): Path<RouteId>) -> ApiResult {
    role.trainer()?;
    ok(svc.negotiation(&route)?)
}

async fn negotiation_step(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Path(route): Path<RouteId>,
    Json(req): Json<StepRequest>,
) -> ApiResult {
    role.trainer()?;
    ok(svc.negotiation_step(&route, req)?)
}

async fn negotiation_finalize(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Path(route): Path<RouteId>,
) -> ApiResult {
    role.trainer()?;
    ok(svc.negotiation_finalize(&route)?)
}

// ---------------------------------------------------------------------------
// Consent and sessions

async fn grant_consent(State(svc): State<AppState>, Json(req): Json<ConsentRequest>) -> ApiResult {
    created(svc.grant_consent(req)?)
}

async fn begin(State(svc): State<AppState>, Json(req): Json<BeginRequest>) -> ApiResult {
    created(svc.begin(req).await?)
}

async fn session_fix(State(svc): State<AppState>, Path(id): Path<SessionId>, Json(fix): Json<GpsFix>) -> ApiResult {
    ok(svc.fix(&id, fix).await?)
}

async fn session_quiz(State(svc): State<AppState>, Path(id): Path<SessionId>, Json(req): Json<QuizRequest>) -> ApiResult {
    ok(svc.quiz(&id, req).await?)
}

async fn session_report(State(svc): State<AppState>, Path(id): Path<SessionId>, Json(req): Json<ReportRequest>) -> ApiResult {
    ok(svc.report(&id, req).await?)
}

async fn session_help(State(svc): State<AppState>, Path(id): Path<SessionId>, Json(req): Json<HelpRequest>) -> ApiResult {
    ok(svc.help(&id, req).await?)
}

async fn session_assist(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Path(id): Path<SessionId>,
    Json(req): Json<AssistRequest>,
) -> ApiResult {
    role.trainer()?;
    ok(svc.assist(&id, req).await?)
}

async fn session_ar(State(svc): State<AppState>, Path(id): Path<SessionId>, Json(req): Json<ArRequest>) -> ApiResult {
    ok(svc.ar(&id, req).await?)
}

async fn session_signal(
    State(svc): State<AppState>,
    Path(id): Path<SessionId>,
    Json(req): Json<SignalCheckRequest>,
) -> ApiResult {
    ok(svc.signal(&id, req).await?)
}

async fn session_end(State(svc): State<AppState>, Path(id): Path<SessionId>, Json(req): Json<EndRequest>) -> ApiResult {
    ok(svc.end(&id, req).await?)
}

async fn session_snapshot(State(svc): State<AppState>, Extension(role): Extension<Role>, Path(id): Path<SessionId>) -> ApiResult {
    role.trainer()?;
    ok(svc.snapshot(&id)?)
}

#[derive(Debug, Deserialize)]
struct FeedQuery {
    from_seq: Option<u64>,
}

async fn feed(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Path(id): Path<SessionId>,
    Query(q): Query<FeedQuery>,
) -> ApiResult {
    role.trainer()?;
    let stream = svc
        .feed_stream(&id, q.from_seq.unwrap_or(1))?
        .map(|e| Ok::<_, Infallible>(e.to_json_line() + "\n"));
    let mut res = Response::new(Body::from_stream(stream));
    res.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/x-ndjson"));
    Ok(res)
}

async fn events(
    State(svc): State<AppState>,
    Extension(role): Extension<Role>,
    Path(id): Path<SessionId>,
    Query(q): Query<FeedQuery>,
) -> ApiResult {
    role.trainer()?;
    ok(svc.feed_events(&id, q.from_seq.unwrap_or(1))?)
}

async fn indicators(State(svc): State<AppState>, Path(id): Path<SessionId>) -> ApiResult {
    ok(svc.indicators(&id)?)
}
