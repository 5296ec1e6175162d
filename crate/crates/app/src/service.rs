//! Application service: the operations behind the HTTP API and the CLI.
//!
//! Durable state lives in the [`Store`]. Live training sessions are held in
//! memory, one async mutex each, so requests for a session are applied one
//! at a time in arrival order. Every engine event is appended to the
//! session log and then published on the feed.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::pin::Pin;
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use futures::stream::{self, Stream};
use routecoach_core::design::{
    apply_edit, build_playback_index, draft_from_erw, preview_poi, reopen_route, start_negotiation,
    DesignError, NegotiationAction, NegotiationSession, PlaybackIndex, PreviewCard, RouteEdit, TranscriptLine,
};
use routecoach_core::engine::{
    begin_session, AssistSource, EngineError, EngineThresholds, NavSnapshot, SessionRecord, Supervision,
    TrainingConfig, TrainingEvent, TrainingSession, UnexpectedKind,
};
use routecoach_core::erw::{
    build_transfer_package, CaptureRole, ErwError, ErwSession, PackageManifest, TransferDestination,
};
use routecoach_core::geo::{GpsFix, Polyline};
use routecoach_core::ids::{AssetId, ErwId, NegotiationId, PoiId, RouteId, SessionId, UserId, WayId};
use routecoach_core::indicators::{indicator_report, trend_report, IndicatorError, IndicatorReport, TrendReport};
use routecoach_core::media::{sha256_hex, MediaAsset, MediaKind, MediaLibrary};
use routecoach_core::payload::Modality;
use routecoach_core::privacy::{ConsentLedger, ConsentRecord, ConsentScope, ItemKind, PrivacyError};
use routecoach_core::route::{RouteDefinition, RouteStatus, Way};
use routecoach_core::sim::{run_simulation, sim_session_id, SimError, WalkerProfile};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::AppConfig;
use crate::feed::{FeedEvent, FeedHub};
use crate::store::{CloudItem, Expect, Store, StoreError, StoredNegotiation, SyncReport};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{message}")]
    Conflict { code: &'static str, message: String },
    #[error("{message}")]
    Rejected { code: &'static str, message: String },
    #[error("{message}")]
    Forbidden { code: &'static str, message: String },
    #[error("missing or invalid bearer token")]
    Unauthorized,
    #[error("the live feed endpoint is not available")]
    FeedUnavailable,
    #[error("stored data failed its integrity check: {0}")]
    Integrity(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::NotFound(_) => 404,
            ServiceError::Conflict { .. } => 409,
            ServiceError::Rejected { .. } => 422,
            ServiceError::Forbidden { .. } => 403,
            ServiceError::Unauthorized => 401,
            ServiceError::FeedUnavailable => 503,
            ServiceError::Integrity(_) | ServiceError::Internal(_) => 500,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not-found",
            ServiceError::Conflict { code, .. }
            | ServiceError::Rejected { code, .. }
            | ServiceError::Forbidden { code, .. } => code,
            ServiceError::Unauthorized => "unauthorized",
            ServiceError::FeedUnavailable => "feed-unavailable",
            ServiceError::Integrity(_) => "integrity",
            ServiceError::Internal(_) => "internal",
        }
    }

    fn rejected(code: &'static str, e: impl ToString) -> Self {
        ServiceError::Rejected {
            code,
            message: e.to_string(),
        }
    }

    fn conflict(code: &'static str, e: impl ToString) -> Self {
        ServiceError::Conflict {
            code,
            message: e.to_string(),
        }
    }
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(what) => ServiceError::NotFound(what),
            StoreError::Conflict { .. } => ServiceError::conflict("conflict", e),
            StoreError::Integrity { .. } => ServiceError::Integrity(e.to_string()),
            StoreError::BadId(_) => ServiceError::rejected("bad-id", e),
            StoreError::Privacy(p) => p.into(),
            StoreError::Io(io) => ServiceError::Internal(io.to_string()),
        }
    }
}

impl From<PrivacyError> for ServiceError {
    fn from(e: PrivacyError) -> Self {
        let code = match &e {
            PrivacyError::EmptyDisclosure => "transparency",
            PrivacyError::ConsentSpent { .. } => "consent-spent",
            PrivacyError::ConsentRequired(_) | PrivacyError::ConsentExpired { .. } | PrivacyError::ConsentScope { .. } => {
                "consent-required"
            }
            PrivacyError::SyncPolicy { .. } => "sync-policy",
            PrivacyError::DuplicateGrant(_) => return ServiceError::conflict("duplicate-consent", e),
            _ => "privacy",
        };
        match code {
            "consent-spent" | "consent-required" => ServiceError::Forbidden {
                code,
                message: e.to_string(),
            },
            _ => ServiceError::rejected(code, e),
        }
    }
}

impl From<EngineError> for ServiceError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Consent(p) => p.into(),
            EngineError::Status(_) => ServiceError::conflict("route-not-working", e),
            EngineError::Ordering { .. } => ServiceError::conflict("ordering", e),
            EngineError::Ended(_) => ServiceError::conflict("session-ended", e),
            EngineError::Role { .. } => ServiceError::Forbidden {
                code: "role",
                message: e.to_string(),
            },
            EngineError::InvalidRoute(_) => ServiceError::rejected("invalid-route", e),
            EngineError::ModalityConstraint => ServiceError::rejected("modality-constraint", e),
            _ => ServiceError::rejected("engine", e),
        }
    }
}

impl From<DesignError> for ServiceError {
    fn from(e: DesignError) -> Self {
        match e {
            DesignError::NotFound(what) => ServiceError::NotFound(what),
            DesignError::Erw(inner) => inner.into(),
            DesignError::Status { .. } => ServiceError::conflict("status", e),
            DesignError::Finalized(_) => ServiceError::conflict("finalized", e),
            DesignError::EditRejected(_) => ServiceError::rejected("edit-rejected", e),
            DesignError::IncompleteNegotiation(_) => ServiceError::rejected("incomplete-negotiation", e),
            DesignError::NoDecisionPoints => ServiceError::rejected("no-decision-points", e),
            DesignError::Precondition(_) => ServiceError::rejected("precondition", e),
            DesignError::OutOfRange { .. } => ServiceError::rejected("out-of-range", e),
            _ => ServiceError::rejected("design", e),
        }
    }
}

impl From<ErwError> for ServiceError {
    fn from(e: ErwError) -> Self {
        match e {
            ErwError::State { .. } => ServiceError::conflict("state", e),
            ErwError::Ordering { .. } => ServiceError::conflict("ordering", e),
            ErwError::PhotoRequired => ServiceError::rejected("photo-required", e),
            ErwError::InsufficientData(_) => ServiceError::rejected("insufficient-data", e),
            ErwError::Classification(msg) => ServiceError::rejected("classification", msg),
            ErwError::Integrity(_) => ServiceError::rejected("integrity", e),
            ErwError::Io(io) => ServiceError::Internal(io.to_string()),
            _ => ServiceError::rejected("erw", e),
        }
    }
}

impl From<IndicatorError> for ServiceError {
    fn from(e: IndicatorError) -> Self {
        match e {
            IndicatorError::Empty => ServiceError::NotFound("no finished sessions".into()),
            _ => ServiceError::rejected("indicators", e),
        }
    }
}

impl From<SimError> for ServiceError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Engine(inner) => inner.into(),
            SimError::Design(inner) => inner.into(),
            _ => ServiceError::rejected("simulation", e),
        }
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;

// ---------------------------------------------------------------------------
// Request and response bodies

/// A blob sent inline. Without an id, one is derived from the content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaUpload {
    #[serde(default)]
    pub id: Option<AssetId>,
    pub data_base64: String,
}

impl MediaUpload {
    pub fn from_bytes(id: Option<&str>, bytes: &[u8]) -> Self {
        Self {
            id: id.map(AssetId::from),
            data_base64: BASE64.encode(bytes),
        }
    }

    fn decode(&self, kind: MediaKind) -> ServiceResult<MediaAsset> {
        let bytes = BASE64
            .decode(self.data_base64.as_bytes())
            .map_err(|e| ServiceError::rejected("bad-media", e))?;
        let prefix = match kind {
            MediaKind::Photo => "photo",
            MediaKind::Video => "video",
            MediaKind::Audio => "audio",
        };
        let id = self
            .id
            .clone()
            .unwrap_or_else(|| AssetId::new(format!("{prefix}-{}", &sha256_hex(&bytes)[..16])));
        crate::store::check_id(id.as_str())?;
        Ok(MediaAsset::new(id, kind, bytes))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErwStartRequest {
    pub ts_ms: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoiCaptureRequest {
    #[serde(flatten)]
    pub at: GpsFix,
    pub photos: Vec<MediaUpload>,
    #[serde(default)]
    pub note: String,
    #[serde(default)]
    pub role: CaptureRole,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ErwFinishRequest {
    #[serde(default)]
    pub video: Option<MediaUpload>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErwFinished {
    pub erw: ErwSession,
    pub path: Polyline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackageRequest {
    pub destination: TransferDestination,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackageResponse {
    pub manifest: PackageManifest,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRouteRequest {
    pub erw_id: ErwId,
    #[serde(default)]
    pub route_id: Option<RouteId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditsRequest {
    pub base_version: u32,
    pub edits: Vec<RouteEdit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReopenRequest {
    pub base_version: u32,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NegotiationStartRequest {
    #[serde(default)]
    pub ts_ms: i64,
}

/// Either a slideshow action (`action` plus optional `detail`) or a curation
/// `edit` made during the negotiation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StepRequest {
    #[serde(default)]
    pub ts_ms: i64,
    #[serde(default)]
    pub action: Option<String>,
    #[serde(default)]
    pub detail: Option<String>,
    #[serde(default)]
    pub poi_id: Option<PoiId>,
    #[serde(default)]
    pub edit: Option<RouteEdit>,
}

impl StepRequest {
    pub fn action(action: NegotiationAction, ts_ms: i64) -> Self {
        let v = serde_json::to_value(&action).expect("action serializes");
        Self {
            ts_ms,
            action: v["action"].as_str().map(str::to_owned),
            detail: v.get("detail").and_then(|d| d.as_str()).map(str::to_owned),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepResponse {
    pub line: TranscriptLine,
    pub cursor: usize,
    pub current_poi: PoiId,
    pub undecided: Vec<PoiId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CloudSync {
    Synced {
        #[serde(flatten)]
        report: SyncReport,
        /// Referenced assets that are not on this device.
        missing_media: Vec<AssetId>,
    },
    Rejected {
        reason: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalizeResponse {
    pub route: RouteDefinition,
    pub cloud: CloudSync,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsentRequest {
    pub user_id: UserId,
    pub scope: ConsentScope,
    pub disclosure: String,
    pub ts_ms: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsentGrant {
    pub consent_id: String,
    pub record: ConsentRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeginRequest {
    #[serde(default)]
    pub session_id: Option<SessionId>,
    pub route_id: RouteId,
    #[serde(default)]
    pub route_version: Option<u32>,
    pub supervision: Supervision,
    pub modalities: BTreeSet<Modality>,
    #[serde(default)]
    pub consent_id: Option<String>,
    #[serde(default)]
    pub thresholds: Option<EngineThresholds>,
    pub ts_ms: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionUpdate {
    pub session_id: SessionId,
    pub events: Vec<TrainingEvent>,
    pub snapshot: NavSnapshot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuizRequest {
    pub quiz_id: String,
    pub choice: AssetId,
    pub ts_ms: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRequest {
    pub kind: UnexpectedKind,
    #[serde(default)]
    pub note: Option<String>,
    pub ts_ms: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HelpRequest {
    #[serde(default)]
    pub reason: Option<String>,
    pub ts_ms: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssistRequest {
    pub source: AssistSource,
    #[serde(default)]
    pub note: Option<String>,
    pub ts_ms: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArRequest {
    #[serde(default)]
    pub poi_id: Option<PoiId>,
    pub ts_ms: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalCheckRequest {
    pub now_ms: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndRequest {
    #[serde(default)]
    pub confidence: Option<u8>,
    pub ts_ms: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndResponse {
    pub record: SessionRecord,
    pub cloud: CloudSync,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateRequest {
    pub profile: WalkerProfile,
    pub seed: u64,
    #[serde(default = "default_supervision")]
    pub supervision: Supervision,
    #[serde(default = "default_modalities")]
    pub modalities: BTreeSet<Modality>,
}

fn default_supervision() -> Supervision {
    Supervision::AppOnly
}

pub fn default_modalities() -> BTreeSet<Modality> {
    [Modality::Text, Modality::Symbol].into_iter().collect()
}

pub type FeedStream = Pin<Box<dyn Stream<Item = FeedEvent> + Send>>;

type LiveSession = Arc<tokio::sync::Mutex<TrainingSession>>;

// ---------------------------------------------------------------------------

pub struct Service {
    store: Store,
    config: AppConfig,
    feed: FeedHub,
    ledger: ConsentLedger,
    /// Ledger lines already written to the store.
    consent_persisted: Mutex<usize>,
    live: Mutex<HashMap<SessionId, LiveSession>>,
    /// ERW and negotiation updates are read-modify-write on one document.
    doc_lock: Mutex<()>,
}

impl Service {
    pub fn open(store: Store, config: AppConfig) -> ServiceResult<Self> {
        let ledger = ConsentLedger::from_ndjson(&store.consent_ndjson()?)?;
        let persisted = ledger.lines().len();
        Ok(Self {
            store,
            config,
            feed: FeedHub::new(),
            ledger,
            consent_persisted: Mutex::new(persisted),
            live: Mutex::new(HashMap::new()),
            doc_lock: Mutex::new(()),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn config(&self) -> &AppConfig {
        &self.config
    }

    fn doc_guard(&self) -> std::sync::MutexGuard<'_, ()> {
        self.doc_lock.lock().expect("document lock poisoned")
    }

    // -----------------------------------------------------------------------
    // Ways

    pub fn create_way(&self, way: Way) -> ServiceResult<Way> {
        self.store.create_way(&way)?;
        Ok(way)
    }

    pub fn way(&self, id: &WayId) -> ServiceResult<Way> {
        Ok(self.store.load_way(id)?)
    }

    // -----------------------------------------------------------------------
    // Exploratory walks

    /// `key` names an ERW session directly or a way with a walk in progress.
    pub fn resolve_erw(&self, key: &str) -> ServiceResult<ErwId> {
        let direct = ErwId::from(key);
        if crate::store::check_id(key).is_ok() && self.store.exists(&format!("erw/{key}.json")) {
            return Ok(direct);
        }
        self.store
            .active_erw(&WayId::from(key))?
            .ok_or_else(|| ServiceError::NotFound(format!("walk in progress for {key}")))
    }

    pub fn erw_start(&self, way_id: &WayId, req: ErwStartRequest) -> ServiceResult<ErwSession> {
        let _g = self.doc_guard();
        self.store.load_way(way_id)?;
        if let Some(active) = self.store.active_erw(way_id)? {
            return Err(ServiceError::conflict(
                "erw-active",
                format!("walk {active} is still recording on way {way_id}"),
            ));
        }
        let prefix = format!("{way_id}-erw-");
        let n = self.store.erw_ids().iter().filter(|id| id.as_str().starts_with(&prefix)).count() + 1;
        let session = ErwSession::start(format!("{prefix}{n}"), way_id.clone(), req.ts_ms);
        self.store.save_erw(&session, Expect::Absent)?;
        self.store.set_active_erw(way_id, Some(session.id()))?;
        Ok(session)
    }

    fn update_erw<T>(&self, key: &str, f: impl FnOnce(&mut ErwSession) -> ServiceResult<T>) -> ServiceResult<(ErwSession, T)> {
        let _g = self.doc_guard();
        let id = self.resolve_erw(key)?;
        let (mut session, rev) = self.store.load_erw(&id)?;
        let out = f(&mut session)?;
        self.store.save_erw(&session, Expect::Rev(rev))?;
        Ok((session, out))
    }

    pub fn erw_fix(&self, key: &str, fix: GpsFix) -> ServiceResult<usize> {
        let (s, ()) = self.update_erw(key, |s| Ok(s.append_fix(fix)?))?;
        Ok(s.fixes().len())
    }

    pub fn erw_poi(&self, key: &str, req: PoiCaptureRequest) -> ServiceResult<PoiId> {
        let assets = req
            .photos
            .iter()
            .map(|p| p.decode(MediaKind::Photo))
            .collect::<ServiceResult<Vec<_>>>()?;
        let ids: Vec<AssetId> = assets.iter().map(|a| a.id.clone()).collect();
        let (_, poi) = self.update_erw(key, |s| {
            let poi = s.capture_poi(req.at, ids, &req.note, req.role)?;
            for a in &assets {
                self.store.put_media(a)?;
            }
            Ok(poi)
        })?;
        Ok(poi)
    }

    pub fn erw_finish(&self, key: &str, req: ErwFinishRequest) -> ServiceResult<ErwFinished> {
        let video = req.video.as_ref().map(|v| v.decode(MediaKind::Video)).transpose()?;
        let (erw, path) = self.update_erw(key, |s| {
            if let Some(v) = &video {
                s.attach_video(v.id.clone())?;
            }
            let path = s.finish()?;
            if let Some(v) = &video {
                self.store.put_media(v)?;
            }
            Ok(path)
        })?;
        self.store.set_active_erw(erw.way_id(), None)?;
        Ok(ErwFinished { erw, path })
    }

    pub fn erw(&self, key: &str) -> ServiceResult<ErwSession> {
        let id = self.resolve_erw(key)?;
        Ok(self.store.load_erw(&id)?.0)
    }

    /// Builds a transfer package and writes it under `packages/<erw>/`.
    pub fn erw_package(&self, key: &str, req: PackageRequest) -> ServiceResult<PackageResponse> {
        let session = self.erw(key)?;
        let mut media = MediaLibrary::new();
        for (id, _) in session.referenced_assets() {
            if let Ok(asset) = self.store.load_media(&id) {
                media.insert(asset);
            }
        }
        let pkg = build_transfer_package(&session, &media, req.destination)?;
        let dir = self.store.root().join("packages").join(session.id().as_str());
        pkg.write_to_dir(&dir)?;
        Ok(PackageResponse {
            manifest: pkg.manifest,
            dir,
        })
    }

    pub fn erw_playback(&self, key: &str) -> ServiceResult<PlaybackIndex> {
        Ok(build_playback_index(&self.erw(key)?)?)
    }

    // -----------------------------------------------------------------------
    // Routes

    pub fn create_route(&self, req: CreateRouteRequest) -> ServiceResult<RouteDefinition> {
        let (erw, _) = self.store.load_erw(&req.erw_id)?;
        let route_id = req.route_id.unwrap_or_else(|| RouteId::new(format!("{}-route", erw.id())));
        let route = draft_from_erw(&erw, route_id)?;
        self.store.save_route(&route, None)?;
        Ok(route)
    }

    /// Stores a route produced elsewhere, e.g. a generated one.
    pub fn import_route(&self, route: &RouteDefinition) -> ServiceResult<()> {
        let base = self.store.latest_route_version(route.id());
        Ok(self.store.save_route(route, base)?)
    }

    pub fn route(&self, id: &RouteId, version: Option<u32>) -> ServiceResult<RouteDefinition> {
        Ok(self.store.load_route(id, version)?)
    }

    fn require_latest(&self, id: &RouteId, base: u32) -> ServiceResult<RouteDefinition> {
        let current = self.store.load_route(id, None)?;
        if current.version() != base {
            return Err(ServiceError::conflict(
                "conflict",
                format!("route {id} is at version {}, edit is based on {base}", current.version()),
            ));
        }
        Ok(current)
    }

    fn open_negotiation(&self, id: &RouteId) -> Option<NegotiationId> {
        let neg_id = self.store.route_negotiation(id).ok()?;
        let (stored, _) = self.store.load_negotiation(&neg_id).ok()?;
        (!stored.session.is_finalized()).then_some(neg_id)
    }

    /// Applies edits in order on top of `base_version`. During a negotiation
    /// edits go through the negotiation instead.
    pub fn route_edits(&self, id: &RouteId, req: EditsRequest) -> ServiceResult<RouteDefinition> {
        let current = self.require_latest(id, req.base_version)?;
        if current.status() == RouteStatus::UnderNegotiation {
            if let Some(neg) = self.open_negotiation(id) {
                return Err(ServiceError::conflict(
                    "negotiation-open",
                    format!("route {id} is being negotiated in {neg}; send edits as negotiation steps"),
                ));
            }
        }
        let mut next = current;
        for edit in &req.edits {
            next = apply_edit(&next, edit)?;
        }
        self.store.save_route(&next, Some(req.base_version))?;
        Ok(next)
    }

    pub fn route_reopen(&self, id: &RouteId, req: ReopenRequest) -> ServiceResult<RouteDefinition> {
        let current = self.require_latest(id, req.base_version)?;
        let next = reopen_route(&current)?;
        self.store.save_route(&next, Some(req.base_version))?;
        Ok(next)
    }

    pub fn preview(&self, id: &RouteId, poi: &PoiId, modalities: &BTreeSet<Modality>) -> ServiceResult<PreviewCard> {
        let route = match self.open_negotiation(id) {
            Some(neg) => self.store.load_negotiation(&neg)?.0.session.route().clone(),
            None => self.store.load_route(id, None)?,
        };
        Ok(preview_poi(&route, poi, modalities)?)
    }

    // -----------------------------------------------------------------------
    // Negotiation

    pub fn negotiation_start(&self, route_id: &RouteId, _req: NegotiationStartRequest) -> ServiceResult<NegotiationSession> {
        let _g = self.doc_guard();
        if let Some(neg) = self.open_negotiation(route_id) {
            return Err(ServiceError::conflict("negotiation-open", format!("negotiation {neg} is still open")));
        }
        let route = self.store.load_route(route_id, None)?;
        let neg_id = format!("{route_id}-n{}", route.version());
        let session = start_negotiation(neg_id, &route)?;
        let mut base = route.version();
        if session.route().version() != route.version() {
            self.store.save_route(session.route(), Some(route.version()))?;
            base = session.route().version();
        }
        let stored = StoredNegotiation {
            base_version: base,
            session,
        };
        self.store.save_negotiation(&stored, Expect::Absent)?;
        Ok(stored.session)
    }

    pub fn negotiation(&self, route_id: &RouteId) -> ServiceResult<NegotiationSession> {
        let neg_id = self.store.route_negotiation(route_id)?;
        Ok(self.store.load_negotiation(&neg_id)?.0.session)
    }

    pub fn negotiation_step(&self, route_id: &RouteId, req: StepRequest) -> ServiceResult<StepResponse> {
        let _g = self.doc_guard();
        let neg_id = self.store.route_negotiation(route_id)?;
        let (mut stored, rev) = self.store.load_negotiation(&neg_id)?;
        let neg = &mut stored.session;
        let line = match (&req.edit, &req.action) {
            (Some(edit), None) => neg.edit(edit, req.ts_ms)?,
            (None, Some(action)) => {
                let mut v = serde_json::json!({ "action": action });
                if let Some(d) = &req.detail {
                    v["detail"] = serde_json::Value::String(d.clone());
                }
                let action: NegotiationAction =
                    serde_json::from_value(v).map_err(|e| ServiceError::rejected("bad-action", e))?;
                if let Some(poi) = &req.poi_id {
                    neg.seek(poi)?;
                }
                neg.step(action, req.ts_ms)?
            }
            _ => {
                return Err(ServiceError::rejected(
                    "bad-step",
                    "a step carries exactly one of `action` or `edit`",
                ))
            }
        };
        let response = StepResponse {
            line: line.clone(),
            cursor: neg.cursor(),
            current_poi: neg.current_poi().id.clone(),
            undecided: neg.undecided(),
        };
        self.store.save_negotiation(&stored, Expect::Rev(rev))?;
        self.store
            .append_transcript(&neg_id, &[serde_json::to_string(&line).expect("transcript line serializes")])?;
        Ok(response)
    }

    /// Finalizes the open negotiation, stores the working route and syncs
    /// the curated artifacts to the cloud.
    pub fn negotiation_finalize(&self, route_id: &RouteId) -> ServiceResult<FinalizeResponse> {
        let _g = self.doc_guard();
        let neg_id = self.store.route_negotiation(route_id)?;
        let (mut stored, rev) = self.store.load_negotiation(&neg_id)?;
        let working = stored.session.finalize()?;
        self.store.save_route(&working, Some(stored.base_version))?;
        self.store.save_negotiation(&stored, Expect::Rev(rev))?;
        let transcript = self.store.load_transcript(&neg_id)?;
        let cloud = self.sync_route(&working, &neg_id, transcript.into_bytes());
        Ok(FinalizeResponse { route: working, cloud })
    }

    /// Offers a working route, its photos and the negotiation transcript to
    /// the cloud. Each asset is classified from its stored media kind.
    fn sync_route(&self, route: &RouteDefinition, neg_id: &NegotiationId, transcript: Vec<u8>) -> CloudSync {
        let mut items = vec![
            CloudItem {
                id: format!("route:{}:v{}", route.id(), route.version()),
                kind: ItemKind::WorkingRoute,
                rel: format!("routes/{}/v{:06}.json", route.id(), route.version()),
                bytes: serde_json::to_vec(route).expect("route serializes"),
            },
            CloudItem {
                id: format!("transcript:{neg_id}"),
                kind: ItemKind::NegotiationTranscript,
                rel: format!("negotiations/{neg_id}.ndjson"),
                bytes: transcript,
            },
        ];
        let mut missing = Vec::new();
        let mut seen = BTreeSet::new();
        for asset_id in route.pois().iter().flat_map(|p| &p.photos) {
            if !seen.insert(asset_id.clone()) {
                continue;
            }
            let Ok(asset) = self.store.load_media(asset_id) else {
                missing.push(asset_id.clone());
                continue;
            };
            let kind = match asset.kind {
                MediaKind::Photo => ItemKind::PoiPhoto { curated: true },
                MediaKind::Video => ItemKind::VideoAsset,
                MediaKind::Audio => ItemKind::PoiPhoto { curated: false },
            };
            items.push(CloudItem {
                id: format!("asset:{asset_id}"),
                kind,
                rel: format!("media/{asset_id}"),
                bytes: asset.bytes,
            });
        }
        match self.store.sync_to_cloud(items, self.config.cloud_gate) {
            Ok(report) => CloudSync::Synced {
                report,
                missing_media: missing,
            },
            Err(e) => CloudSync::Rejected { reason: e.to_string() },
        }
    }

    // -----------------------------------------------------------------------
    // Consent

    fn flush_consent(&self) -> ServiceResult<()> {
        let mut persisted = self.consent_persisted.lock().expect("consent lock poisoned");
        let lines = self.ledger.lines();
        if lines.len() > *persisted {
            self.store.append_consent(&lines[*persisted..])?;
            *persisted = lines.len();
        }
        Ok(())
    }

    pub fn grant_consent(&self, req: ConsentRequest) -> ServiceResult<ConsentGrant> {
        let record = self
            .ledger
            .grant_consent(&req.user_id, req.scope, &req.disclosure, req.ts_ms)?;
        self.flush_consent()?;
        Ok(ConsentGrant {
            consent_id: record.id(),
            record,
        })
    }

    fn consent_record(&self, id: &str) -> ServiceResult<ConsentRecord> {
        self.ledger
            .lines()
            .into_iter()
            .find(|l| l.session_id.is_none() && format!("{}/{}/{}", l.user_id, l.scope, l.granted_ts_ms) == id)
            .map(|l| ConsentRecord {
                user_id: l.user_id,
                scope: l.scope,
                granted_ts_ms: l.granted_ts_ms,
                disclosure_sha256: l.disclosure_sha256,
            })
            .ok_or_else(|| {
                PrivacyError::ConsentRequired(format!("consent {id} was never granted")).into()
            })
    }

    // -----------------------------------------------------------------------
    // Training sessions

    pub fn feed_enabled(&self) -> bool {
        self.config.feed_enabled
    }

    fn live(&self, id: &SessionId) -> ServiceResult<LiveSession> {
        self.live
            .lock()
            .expect("live sessions poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| {
                if self.store.session_exists(id) {
                    ServiceError::conflict("session-ended", format!("session {id} has ended"))
                } else {
                    ServiceError::NotFound(format!("session {id}"))
                }
            })
    }

    fn record_events(&self, id: &SessionId, events: &[TrainingEvent], snapshot: NavSnapshot) -> ServiceResult<()> {
        self.store.append_events(id, events)?;
        self.feed.publish(id, events, Some(snapshot));
        Ok(())
    }

    pub async fn begin(&self, req: BeginRequest) -> ServiceResult<SessionUpdate> {
        let route = self.store.load_route(&req.route_id, req.route_version)?;
        let config = TrainingConfig {
            supervision: req.supervision,
            modalities: req.modalities,
            thresholds: req.thresholds.unwrap_or(self.config.thresholds),
        };
        // Checked before consent is spent, so a refused start costs nothing.
        if config.feed_mandatory() && !self.feed_enabled() {
            return Err(ServiceError::FeedUnavailable);
        }
        let session_id = req
            .session_id
            .unwrap_or_else(|| SessionId::new(format!("{}-{}", route.id(), req.ts_ms)));
        crate::store::check_id(session_id.as_str())?;
        let consent = req.consent_id.as_deref().map(|c| self.consent_record(c)).transpose()?;

        let mut live = self.live.lock().expect("live sessions poisoned");
        if live.contains_key(&session_id) || self.store.session_exists(&session_id) {
            return Err(ServiceError::conflict("session-exists", format!("session {session_id} exists")));
        }
        let session = begin_session(&route, config, consent.as_ref(), &self.ledger, session_id.clone(), req.ts_ms);
        self.flush_consent()?;
        let session = session?;
        let events = session.events().to_vec();
        let snapshot = session.snapshot();
        self.feed.open(&session_id);
        self.record_events(&session_id, &events, snapshot)?;
        live.insert(session_id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
        Ok(SessionUpdate {
            session_id,
            events,
            snapshot,
        })
    }

    async fn apply<F>(&self, id: &SessionId, f: F) -> ServiceResult<SessionUpdate>
    where
        F: FnOnce(&mut TrainingSession) -> Result<Vec<TrainingEvent>, EngineError>,
    {
        let session = self.live(id)?;
        let mut s = session.lock().await;
        let events = f(&mut s)?;
        let snapshot = s.snapshot();
        self.record_events(id, &events, snapshot)?;
        Ok(SessionUpdate {
            session_id: id.clone(),
            events,
            snapshot,
        })
    }

    pub async fn fix(&self, id: &SessionId, fix: GpsFix) -> ServiceResult<SessionUpdate> {
        self.apply(id, |s| s.ingest_fix(fix)).await
    }

    pub async fn quiz(&self, id: &SessionId, req: QuizRequest) -> ServiceResult<SessionUpdate> {
        self.apply(id, |s| s.answer_quiz(&req.quiz_id, &req.choice, req.ts_ms)).await
    }

    pub async fn report(&self, id: &SessionId, req: ReportRequest) -> ServiceResult<SessionUpdate> {
        self.apply(id, |s| s.report_unexpected(req.kind, req.note, req.ts_ms)).await
    }

    pub async fn help(&self, id: &SessionId, req: HelpRequest) -> ServiceResult<SessionUpdate> {
        self.apply(id, |s| s.request_help(req.reason, req.ts_ms)).await
    }

    pub async fn assist(&self, id: &SessionId, req: AssistRequest) -> ServiceResult<SessionUpdate> {
        self.apply(id, |s| s.log_assist(req.source, req.note, req.ts_ms)).await
    }

    pub async fn ar(&self, id: &SessionId, req: ArRequest) -> ServiceResult<SessionUpdate> {
        self.apply(id, |s| s.activate_ar(req.poi_id, req.ts_ms)).await
    }

    pub async fn signal(&self, id: &SessionId, req: SignalCheckRequest) -> ServiceResult<SessionUpdate> {
        self.apply(id, |s| s.check_signal(req.now_ms)).await
    }

    pub async fn end(&self, id: &SessionId, req: EndRequest) -> ServiceResult<EndResponse> {
        let session = self.live(id)?;
        let mut s = session.lock().await;
        let before = s.events().len();
        let record = s.end_session(req.confidence, req.ts_ms)?;
        let snapshot = s.snapshot();
        self.record_events(id, &record.events()[before..], snapshot)?;
        self.store.save_record(&record)?;
        self.feed.close(id);
        self.live.lock().expect("live sessions poisoned").remove(id);
        let cloud = self.sync_record(&record);
        Ok(EndResponse { record, cloud })
    }

    fn sync_record(&self, record: &SessionRecord) -> CloudSync {
        let item = CloudItem {
            id: format!("session:{}", record.session_id()),
            kind: ItemKind::SessionRecord,
            rel: format!("sessions/{}.json", record.session_id()),
            bytes: serde_json::to_vec(record).expect("record serializes"),
        };
        match self.store.sync_to_cloud(vec![item], self.config.cloud_gate) {
            Ok(report) => CloudSync::Synced {
                report,
                missing_media: Vec::new(),
            },
            Err(e) => CloudSync::Rejected { reason: e.to_string() },
        }
    }

    pub fn snapshot(&self, id: &SessionId) -> ServiceResult<NavSnapshot> {
        let session = self.live(id)?;
        let s = session
            .try_lock()
            .map_err(|_| ServiceError::conflict("busy", "session is being updated"))?;
        Ok(s.snapshot())
    }

    fn stored_feed(&self, id: &SessionId, from_seq: u64) -> ServiceResult<Vec<FeedEvent>> {
        if !self.store.session_exists(id) {
            return Err(ServiceError::NotFound(format!("session {id}")));
        }
        Ok(self
            .store
            .load_events(id)?
            .into_iter()
            .filter(|e| e.seq >= from_seq)
            .map(|e| FeedEvent {
                session_id: id.clone(),
                seq: e.seq,
                event: e,
                position: None,
            })
            .collect())
    }

    /// Live stream of envelopes from `from_seq` on. Sessions that ended
    /// before a restart are served from their persisted log.
    pub fn feed_stream(&self, id: &SessionId, from_seq: u64) -> ServiceResult<FeedStream> {
        if !self.feed_enabled() {
            return Err(ServiceError::FeedUnavailable);
        }
        match self.feed.subscribe(id, from_seq) {
            Some(s) => Ok(Box::pin(s)),
            None => Ok(Box::pin(stream::iter(self.stored_feed(id, from_seq)?))),
        }
    }

    /// Polling fallback: the envelopes that exist now.
    pub fn feed_events(&self, id: &SessionId, from_seq: u64) -> ServiceResult<Vec<FeedEvent>> {
        if !self.feed_enabled() {
            return Err(ServiceError::FeedUnavailable);
        }
        match self.feed.replay(id, from_seq) {
            Some(events) => Ok(events),
            None => self.stored_feed(id, from_seq),
        }
    }

    pub fn session_events(&self, id: &SessionId) -> ServiceResult<Vec<TrainingEvent>> {
        Ok(self.store.load_events(id)?)
    }

    // -----------------------------------------------------------------------
    // Indicators

    pub fn indicators(&self, id: &SessionId) -> ServiceResult<IndicatorReport> {
        if self.live.lock().expect("live sessions poisoned").contains_key(id) {
            return Err(ServiceError::conflict("session-active", format!("session {id} has not ended")));
        }
        let record = self.store.load_record(id)?;
        Ok(indicator_report(&record)?)
    }

    pub fn trend(&self, way: &WayId) -> ServiceResult<TrendReport> {
        let records = self.store.records_for_way(way)?;
        Ok(trend_report(&records, &self.config.policy)?)
    }

    // -----------------------------------------------------------------------
    // Simulation

    /// Runs a simulated walk on a stored working route and keeps its record.
    pub fn simulate(&self, route_id: &RouteId, req: SimulateRequest) -> ServiceResult<SessionRecord> {
        let route = self.store.load_route(route_id, None)?;
        let config = TrainingConfig {
            supervision: req.supervision,
            modalities: req.modalities,
            thresholds: self.config.thresholds,
        };
        let id = sim_session_id(&route, req.seed);
        if self.store.session_exists(&id) {
            return Err(ServiceError::conflict("session-exists", format!("session {id} exists")));
        }
        let record = run_simulation(&route, &config, &req.profile, req.seed)?;
        self.store.append_events(record.session_id(), record.events())?;
        self.store.save_record(&record)?;
        Ok(record)
    }
}
