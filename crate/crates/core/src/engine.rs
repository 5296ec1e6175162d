//! Live training state machine.
//!
//! A session consumes GPS fixes strictly in timestamp order and appends
//! events to its log: POI alerts shaped by the support mode of the sub-path a
//! POI lies in, quizzes, rewards and mistakes at decision points, off-track
//! episodes and signal gaps. Off-track and signal detection never depend on
//! the support mode.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geo::{
    haversine_distance, initial_bearing_deg, project_onto_polyline, AlongWindow, GeoError, GeoPoint,
    GpsFix, ProjectedPosition,
};
use crate::ids::{AssetId, PoiId, RouteId, SessionId, WayId};
use crate::payload::{has_primary_modality, InstructionPayload, Modality};
use crate::privacy::{ConsentLedger, ConsentRecord, ConsentScope, PrivacyError};
use crate::route::{
    subpath_index, validate_route, PoiKind, RouteDefinition, RouteStatus, SubPath, SupportMode,
    ValidationReport,
};

pub const DEFAULT_OFF_TRACK_M: f64 = 30.0;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("route is {0:?}; training needs a working route")]
    Status(RouteStatus),
    #[error("route is invalid: {0}")]
    InvalidRoute(ValidationReport),
    #[error("modality constraint: at least one modality other than AR is required")]
    ModalityConstraint,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("consent required: {0}")]
    Consent(#[from] PrivacyError),
    #[error("out of order: {got} ms is not after {last} ms")]
    Ordering { last: i64, got: i64 },
    #[error("session {0} has ended")]
    Ended(SessionId),
    #[error("no quiz is open")]
    NoOpenQuiz,
    #[error("quiz {got} is not the open quiz {open}")]
    QuizMismatch { open: String, got: String },
    #[error("{0} is not one of the offered choices")]
    InvalidChoice(AssetId),
    #[error("{assist:?} assist is not allowed under {supervision:?} supervision")]
    Role {
        assist: AssistSource,
        supervision: Supervision,
    },
    #[error("AR is not enabled for this session")]
    ArUnavailable,
    #[error("confidence must be between 1 and 5, got {0}")]
    InvalidConfidence(u8),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Detection thresholds. Every field can be overridden from a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineThresholds {
    /// Added to a POI's radius before it counts as left again.
    pub exit_hysteresis_m: f64,
    pub off_track_m: f64,
    /// Consecutive fixes at or beyond `off_track_m` that open an episode.
    pub off_track_fixes: u32,
    pub back_on_track_m: f64,
    /// Progress only counts for fixes closer than this to the route.
    pub watermark_advance_m: f64,
    pub reward_commit_m: f64,
    pub mistake_window_m: f64,
    pub signal_gap_ms: i64,
    pub projection_half_window_m: f64,
}

impl Default for EngineThresholds {
    fn default() -> Self {
        Self {
            exit_hysteresis_m: 10.0,
            off_track_m: DEFAULT_OFF_TRACK_M,
            off_track_fixes: 3,
            back_on_track_m: 15.0,
            watermark_advance_m: 15.0,
            reward_commit_m: 20.0,
            mistake_window_m: 50.0,
            signal_gap_ms: 20_000,
            projection_half_window_m: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    InPerson,
    Remote,
    AppOnly,
}

impl Supervision {
    /// The next level with less human presence.
    pub fn step_down(self) -> Option<Supervision> {
        match self {
            Supervision::InPerson => Some(Supervision::Remote),
            Supervision::Remote => Some(Supervision::AppOnly),
            Supervision::AppOnly => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub supervision: Supervision,
    pub modalities: BTreeSet<Modality>,
    #[serde(default)]
    pub thresholds: EngineThresholds,
}

impl TrainingConfig {
    pub fn new(supervision: Supervision, modalities: impl IntoIterator<Item = Modality>) -> Self {
        Self {
            supervision,
            modalities: modalities.into_iter().collect(),
            thresholds: EngineThresholds::default(),
        }
    }

    /// Remote supervision relies on the live feed.
    pub fn feed_mandatory(&self) -> bool {
        self.supervision == Supervision::Remote
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !has_primary_modality(&self.modalities) {
            return Err(EngineError::ModalityConstraint);
        }
        let t = &self.thresholds;
        let positive = [
            t.off_track_m,
            t.back_on_track_m,
            t.watermark_advance_m,
            t.projection_half_window_m,
        ];
        if positive.iter().any(|v| !(*v > 0.0))
            || t.exit_hysteresis_m < 0.0
            || t.reward_commit_m < 0.0
            || t.mistake_window_m < 0.0
            || t.off_track_fixes == 0
            || t.signal_gap_ms <= 0
        {
            return Err(EngineError::InvalidConfig("thresholds must be positive".into()));
        }
        if t.back_on_track_m > t.off_track_m {
            return Err(EngineError::InvalidConfig(
                "back-on-track distance exceeds the off-track distance".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssistSource {
    InPersonTrainer,
    RemoteTrainer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnexpectedKind {
    RoadBlocked,
    Panic,
    Lost,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeEnd {
    #[serde(rename = "self")]
    SelfRecovered,
    #[serde(rename = "assisted")]
    Assisted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryOption {
    BackOnTrack,
    Help,
}

/// Where to walk to get back onto the route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub target: GeoPoint,
    pub distance_m: f64,
    pub bearing_deg: f64,
}

/// Event types and their payloads. Every payload carries `along_m`, the
/// route position the event is attributed to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload")]
pub enum EventKind {
    SessionStart {
        along_m: f64,
        route_id: RouteId,
        route_version: u32,
        supervision: Supervision,
        modalities: BTreeSet<Modality>,
    },
    VicinityAlert {
        along_m: f64,
        poi_id: PoiId,
        poi_kind: PoiKind,
        mode: SupportMode,
    },
    Instruction {
        along_m: f64,
        poi_id: PoiId,
        /// Shown after a wrong quiz answer.
        fallback: bool,
        content: InstructionPayload,
    },
    Reassurance {
        along_m: f64,
        poi_id: PoiId,
        content: InstructionPayload,
    },
    QuizPrompt {
        along_m: f64,
        quiz_id: String,
        poi_id: PoiId,
        choices: Vec<AssetId>,
    },
    QuizAnswer {
        along_m: f64,
        quiz_id: String,
        poi_id: PoiId,
        correct: bool,
        /// False when the quiz was closed without an answer.
        answered: bool,
        choice: Option<AssetId>,
    },
    Reward {
        along_m: f64,
        poi_id: PoiId,
    },
    MistakeAlert {
        along_m: f64,
        poi_id: PoiId,
    },
    OffTrackBegin {
        along_m: f64,
        cross_track_m: f64,
        attributed_poi: Option<PoiId>,
    },
    OffTrackEnd {
        /// Where the episode began, so both ends land in one sub-path.
        along_m: f64,
        resolution: EpisodeEnd,
    },
    SignalLost {
        along_m: f64,
        last_fix_ts_ms: i64,
    },
    SignalRestored {
        along_m: f64,
        gap_ms: i64,
    },
    RecoveryPrompt {
        along_m: f64,
        options: Vec<RecoveryOption>,
        guidance: Option<Guidance>,
    },
    HelpRequest {
        along_m: f64,
        reason: Option<String>,
    },
    UnexpectedReport {
        along_m: f64,
        kind: UnexpectedKind,
        note: Option<String>,
    },
    AssistLogged {
        along_m: f64,
        source: AssistSource,
        note: Option<String>,
        attributed_poi: Option<PoiId>,
    },
    #[serde(rename = "ARActivated")]
    ArActivated {
        along_m: f64,
        poi_id: Option<PoiId>,
    },
    SessionEnd {
        along_m: f64,
        confidence: Option<u8>,
        ended_off_track: bool,
        unanswered_quiz: bool,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::SessionStart { .. } => "SessionStart",
            EventKind::VicinityAlert { .. } => "VicinityAlert",
            EventKind::Instruction { .. } => "Instruction",
            EventKind::Reassurance { .. } => "Reassurance",
            EventKind::QuizPrompt { .. } => "QuizPrompt",
            EventKind::QuizAnswer { .. } => "QuizAnswer",
            EventKind::Reward { .. } => "Reward",
            EventKind::MistakeAlert { .. } => "MistakeAlert",
            EventKind::OffTrackBegin { .. } => "OffTrackBegin",
            EventKind::OffTrackEnd { .. } => "OffTrackEnd",
            EventKind::SignalLost { .. } => "SignalLost",
            EventKind::SignalRestored { .. } => "SignalRestored",
            EventKind::RecoveryPrompt { .. } => "RecoveryPrompt",
            EventKind::HelpRequest { .. } => "HelpRequest",
            EventKind::UnexpectedReport { .. } => "UnexpectedReport",
            EventKind::AssistLogged { .. } => "AssistLogged",
            EventKind::ArActivated { .. } => "ARActivated",
            EventKind::SessionEnd { .. } => "SessionEnd",
        }
    }

    pub fn along_m(&self) -> f64 {
        match self {
            EventKind::SessionStart { along_m, .. }
            | EventKind::VicinityAlert { along_m, .. }
            | EventKind::Instruction { along_m, .. }
            | EventKind::Reassurance { along_m, .. }
            | EventKind::QuizPrompt { along_m, .. }
            | EventKind::QuizAnswer { along_m, .. }
            | EventKind::Reward { along_m, .. }
            | EventKind::MistakeAlert { along_m, .. }
            | EventKind::OffTrackBegin { along_m, .. }
            | EventKind::OffTrackEnd { along_m, .. }
            | EventKind::SignalLost { along_m, .. }
            | EventKind::SignalRestored { along_m, .. }
            | EventKind::RecoveryPrompt { along_m, .. }
            | EventKind::HelpRequest { along_m, .. }
            | EventKind::UnexpectedReport { along_m, .. }
            | EventKind::AssistLogged { along_m, .. }
            | EventKind::ArActivated { along_m, .. }
            | EventKind::SessionEnd { along_m, .. } => *along_m,
        }
    }

    /// The POI that caused the event, for POI-triggered events.
    pub fn poi_id(&self) -> Option<&PoiId> {
        match self {
            EventKind::VicinityAlert { poi_id, .. }
            | EventKind::Instruction { poi_id, .. }
            | EventKind::Reassurance { poi_id, .. }
            | EventKind::QuizPrompt { poi_id, .. }
            | EventKind::QuizAnswer { poi_id, .. }
            | EventKind::Reward { poi_id, .. }
            | EventKind::MistakeAlert { poi_id, .. } => Some(poi_id),
            _ => None,
        }
    }
}

/// One line of the event log: `{ts_ms, session_id, seq, type, payload}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingEvent {
    pub ts_ms: i64,
    pub session_id: SessionId,
    /// Gapless, starting at 1.
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl TrainingEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

pub fn events_to_ndjson(events: &[TrainingEvent]) -> String {
    events.iter().map(|e| e.to_json_line() + "\n").collect()
}

pub fn events_from_ndjson(text: &str) -> Result<Vec<TrainingEvent>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NavMode {
    OnTrack,
    OffTrack,
    SignalLost,
}

/// Navigation state attached to feed envelopes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavSnapshot {
    pub ts_ms: i64,
    pub position: Option<GeoPoint>,
    pub along_m: f64,
    pub cross_track_m: Option<f64>,
    pub watermark_m: f64,
    pub mode: NavMode,
}

#[derive(Debug, Clone, Copy)]
struct PoiTrack {
    along: f64,
    inside: bool,
    entered: bool,
}

#[derive(Debug, Clone)]
struct OpenQuiz {
    id: String,
    poi: usize,
    correct: AssetId,
    choices: Vec<AssetId>,
}

#[derive(Debug, Clone, Copy)]
struct Episode {
    begin_along: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingSession {
    id: SessionId,
    route: RouteDefinition,
    config: TrainingConfig,
    consent_ref: String,
    started_ts_ms: i64,
    last_ts_ms: i64,
    last_fix: Option<GpsFix>,
    last_pos: Option<ProjectedPosition>,
    watermark: f64,
    over_count: u32,
    episode: Option<Episode>,
    /// After an assisted end, counting restarts only once back near the route.
    rearm_pending: bool,
    signal_lost: bool,
    tracks: Vec<PoiTrack>,
    entered_order: Vec<usize>,
    quiz: Option<OpenQuiz>,
    quiz_counter: u32,
    rewards: Vec<usize>,
    events: Vec<TrainingEvent>,
    fixes: Vec<GpsFix>,
    ended: bool,
}

/// Starts a session on a working route. The consent record is spent
/// atomically and only after every other check has passed.
pub fn begin_session(
    route: &RouteDefinition,
    config: TrainingConfig,
    consent: Option<&ConsentRecord>,
    ledger: &ConsentLedger,
    session_id: SessionId,
    ts_ms: i64,
) -> Result<TrainingSession, EngineError> {
    if route.status() != RouteStatus::Working {
        return Err(EngineError::Status(route.status()));
    }
    let report = validate_route(route);
    if !report.is_valid() {
        return Err(EngineError::InvalidRoute(report));
    }
    config.validate()?;
    let consent = consent.ok_or_else(|| {
        PrivacyError::ConsentRequired("no consent record was presented for this session".into())
    })?;
    ledger.spend(consent, &session_id, ConsentScope::TrainingTelemetry, ts_ms)?;

    let tracks = route
        .poi_positions()
        .into_iter()
        .map(|p| PoiTrack {
            along: p.along_track,
            inside: false,
            entered: false,
        })
        .collect();
    let mut s = TrainingSession {
        id: session_id,
        route: route.clone(),
        config,
        consent_ref: consent.id(),
        started_ts_ms: ts_ms,
        last_ts_ms: ts_ms,
        last_fix: None,
        last_pos: None,
        watermark: 0.0,
        over_count: 0,
        episode: None,
        rearm_pending: false,
        signal_lost: false,
        tracks,
        entered_order: Vec::new(),
        quiz: None,
        quiz_counter: 0,
        rewards: Vec::new(),
        events: Vec::new(),
        fixes: Vec::new(),
        ended: false,
    };
    let start = EventKind::SessionStart {
        along_m: 0.0,
        route_id: route.id().clone(),
        route_version: route.version(),
        supervision: s.config.supervision,
        modalities: s.config.modalities.clone(),
    };
    s.emit(ts_ms, start);
    Ok(s)
}

impl TrainingSession {
    pub fn id(&self) -> &SessionId {
        &self.id
    }

    pub fn route(&self) -> &RouteDefinition {
        &self.route
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn consent_ref(&self) -> &str {
        &self.consent_ref
    }

    pub fn events(&self) -> &[TrainingEvent] {
        &self.events
    }

    pub fn watermark(&self) -> f64 {
        self.watermark
    }

    pub fn is_off_track(&self) -> bool {
        self.episode.is_some()
    }

    pub fn is_ended(&self) -> bool {
        self.ended
    }

    pub fn open_quiz(&self) -> Option<(&str, &[AssetId])> {
        self.quiz.as_ref().map(|q| (q.id.as_str(), q.choices.as_slice()))
    }

    pub fn snapshot(&self) -> NavSnapshot {
        let mode = if self.signal_lost {
            NavMode::SignalLost
        } else if self.episode.is_some() {
            NavMode::OffTrack
        } else {
            NavMode::OnTrack
        };
        NavSnapshot {
            ts_ms: self.last_ts_ms,
            position: self.last_fix.map(|f| f.point),
            along_m: self.last_pos.map_or(0.0, |p| p.along_track),
            cross_track_m: self.last_pos.map(|p| p.cross_track),
            watermark_m: self.watermark,
            mode,
        }
    }

    fn emit(&mut self, ts_ms: i64, kind: EventKind) {
        let seq = self.events.len() as u64 + 1;
        self.events.push(TrainingEvent {
            ts_ms,
            session_id: self.id.clone(),
            seq,
            kind,
        });
    }

    fn check_op(&self, ts_ms: i64) -> Result<(), EngineError> {
        if self.ended {
            return Err(EngineError::Ended(self.id.clone()));
        }
        if ts_ms < self.last_ts_ms {
            return Err(EngineError::Ordering {
                last: self.last_ts_ms,
                got: ts_ms,
            });
        }
        Ok(())
    }

    fn poi_id(&self, idx: usize) -> PoiId {
        self.route.pois()[idx].id.clone()
    }

    fn mode_at(&self, along: f64) -> SupportMode {
        subpath_index(self.route.subpaths(), along)
            .map_or(SupportMode::Actionable, |i| self.route.subpaths()[i].mode)
    }

    fn payload(&self, idx: usize) -> InstructionPayload {
        InstructionPayload::for_poi(&self.route.pois()[idx], &self.config.modalities)
    }

    /// The landmark a mistake at `along` belongs to: the most recently
    /// entered one that `along` lies at or up to the mistake window past.
    fn attribute(&self, along: f64) -> Option<usize> {
        self.entered_order.iter().rev().copied().find(|&i| {
            let poi = &self.route.pois()[i];
            let at = self.tracks[i].along;
            poi.kind == PoiKind::Landmark
                && along >= at - poi.radius_m
                && along <= at + self.config.thresholds.mistake_window_m
        })
    }

    fn since(&self, start: usize) -> Vec<TrainingEvent> {
        self.events[start..].to_vec()
    }

    /// Processes one GPS fix and returns the events it produced.
    pub fn ingest_fix(&mut self, fix: GpsFix) -> Result<Vec<TrainingEvent>, EngineError> {
        self.check_op(fix.ts_ms)?;
        if let Some(prev) = self.last_fix {
            if fix.ts_ms <= prev.ts_ms {
                return Err(EngineError::Ordering {
                    last: prev.ts_ms,
                    got: fix.ts_ms,
                });
            }
        }
        if !fix.point.is_valid() {
            return Err(GeoError::InvalidCoordinate {
                lat: fix.point.lat,
                lon: fix.point.lon,
            }
            .into());
        }
        let t = self.config.thresholds;
        let start = self.events.len();
        let ts = fix.ts_ms;

        if let Some(prev) = self.last_fix {
            let gap = ts - prev.ts_ms;
            if self.signal_lost {
                self.signal_lost = false;
                self.emit(ts, EventKind::SignalRestored { along_m: self.watermark, gap_ms: gap });
            } else if gap > t.signal_gap_ms {
                self.emit(
                    ts,
                    EventKind::SignalLost {
                        along_m: self.watermark,
                        last_fix_ts_ms: prev.ts_ms,
                    },
                );
                self.emit(ts, EventKind::SignalRestored { along_m: self.watermark, gap_ms: gap });
            }
        }

        let window = AlongWindow::around(self.watermark, t.projection_half_window_m);
        let pos = project_onto_polyline(fix.point, self.route.geometry(), window)?;
        self.last_fix = Some(fix);
        self.last_pos = Some(pos);
        self.last_ts_ms = ts;
        self.fixes.push(fix);

        match self.episode {
            None => {
                if self.rearm_pending {
                    if pos.cross_track < t.back_on_track_m {
                        self.rearm_pending = false;
                    }
                } else if pos.cross_track >= t.off_track_m {
                    self.over_count += 1;
                } else {
                    self.over_count = 0;
                }
                if self.over_count >= t.off_track_fixes {
                    self.begin_episode(ts, fix.point, pos);
                }
            }
            Some(ep) => {
                if pos.cross_track < t.back_on_track_m {
                    self.episode = None;
                    self.over_count = 0;
                    self.emit(
                        ts,
                        EventKind::OffTrackEnd {
                            along_m: ep.begin_along,
                            resolution: EpisodeEnd::SelfRecovered,
                        },
                    );
                }
            }
        }

        if self.episode.is_none() && !self.rearm_pending && pos.cross_track < t.watermark_advance_m {
            self.watermark = self.watermark.max(pos.along_track);
        }

        if self.episode.is_none() {
            let mut due: Vec<usize> = self
                .rewards
                .iter()
                .copied()
                .filter(|&i| self.watermark >= self.tracks[i].along + t.reward_commit_m)
                .collect();
            due.sort_by(|a, b| self.tracks[*a].along.total_cmp(&self.tracks[*b].along));
            for i in due {
                self.rewards.retain(|&r| r != i);
                let along = self.tracks[i].along;
                self.emit(ts, EventKind::Reward { along_m: along, poi_id: self.poi_id(i) });
            }
        }

        self.update_geofences(ts, fix.point);
        Ok(self.since(start))
    }

    fn begin_episode(&mut self, ts: i64, at: GeoPoint, pos: ProjectedPosition) {
        let begin = self.watermark;
        let attributed = self.attribute(begin);
        self.episode = Some(Episode { begin_along: begin });
        self.emit(
            ts,
            EventKind::OffTrackBegin {
                along_m: begin,
                cross_track_m: pos.cross_track,
                attributed_poi: attributed.map(|i| self.poi_id(i)),
            },
        );
        if let Some(i) = attributed {
            if self.rewards.contains(&i) {
                self.rewards.retain(|&r| r != i);
                let along = self.tracks[i].along;
                self.emit(ts, EventKind::MistakeAlert { along_m: along, poi_id: self.poi_id(i) });
            }
        }
        let target = self.route.geometry().point_at(pos.along_track);
        let guidance = Guidance {
            target,
            distance_m: haversine_distance(at, target),
            bearing_deg: initial_bearing_deg(at, target),
        };
        self.emit(
            ts,
            EventKind::RecoveryPrompt {
                along_m: begin,
                options: vec![RecoveryOption::BackOnTrack, RecoveryOption::Help],
                guidance: Some(guidance),
            },
        );
    }

    fn update_geofences(&mut self, ts: i64, p: GeoPoint) {
        let t = self.config.thresholds;
        let lo = self.watermark - t.projection_half_window_m;
        let hi = self.watermark + t.projection_half_window_m;
        for i in 0..self.tracks.len() {
            let radius = self.route.pois()[i].radius_m;
            let d = haversine_distance(p, self.route.pois()[i].coordinate);
            let track = self.tracks[i];
            if track.inside {
                if d > radius + t.exit_hysteresis_m {
                    self.tracks[i].inside = false;
                }
                continue;
            }
            if self.episode.is_some() || track.along < lo || track.along > hi || d > radius {
                continue;
            }
            self.tracks[i].inside = true;
            if !track.entered {
                self.tracks[i].entered = true;
                self.entered_order.push(i);
                self.on_first_entry(ts, i);
            }
        }
    }

    fn on_first_entry(&mut self, ts: i64, i: usize) {
        let along = self.tracks[i].along;
        let mode = self.mode_at(along);
        let kind = self.route.pois()[i].kind;
        if mode == SupportMode::Mute {
            return;
        }
        let poi_id = self.poi_id(i);
        if kind == PoiKind::Landmark && mode == SupportMode::Quiz {
            self.close_quiz(ts);
        }
        self.emit(
            ts,
            EventKind::VicinityAlert {
                along_m: along,
                poi_id: poi_id.clone(),
                poi_kind: kind,
                mode,
            },
        );
        match (kind, mode) {
            (PoiKind::Landmark, SupportMode::Actionable) => {
                let content = self.payload(i);
                self.emit(
                    ts,
                    EventKind::Instruction {
                        along_m: along,
                        poi_id,
                        fallback: false,
                        content,
                    },
                );
            }
            (PoiKind::Landmark, SupportMode::Quiz) => self.prompt_quiz(ts, i),
            (PoiKind::Landmark, SupportMode::Reward) => self.rewards.push(i),
            (PoiKind::Reassurance, SupportMode::Actionable | SupportMode::Quiz) => {
                let content = self.payload(i);
                self.emit(ts, EventKind::Reassurance { along_m: along, poi_id, content });
            }
            _ => {}
        }
    }

    fn prompt_quiz(&mut self, ts: i64, i: usize) {
        self.quiz_counter += 1;
        let quiz_id = format!("{}-q{}", self.id, self.quiz_counter);
        let pois = self.route.pois();
        let correct = pois[i].primary_photo().cloned().expect("validated pois have photos");
        let mut pool: Vec<AssetId> = Vec::new();
        for (j, p) in pois.iter().enumerate() {
            if let Some(a) = p.primary_photo() {
                if j != i && *a != correct && !pool.contains(a) {
                    pool.push(a.clone());
                }
            }
        }
        let digest = Sha256::digest(quiz_id.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut choices: Vec<AssetId> = pool.choose_multiple(&mut rng, 2).cloned().collect();
        choices.push(correct.clone());
        choices.shuffle(&mut rng);

        self.quiz = Some(OpenQuiz {
            id: quiz_id.clone(),
            poi: i,
            correct,
            choices: choices.clone(),
        });
        let along = self.tracks[i].along;
        self.emit(
            ts,
            EventKind::QuizPrompt {
                along_m: along,
                quiz_id,
                poi_id: self.poi_id(i),
                choices,
            },
        );
    }

    /// Closes an open quiz without an answer. Returns whether one was open.
    fn close_quiz(&mut self, ts: i64) -> bool {
        let Some(q) = self.quiz.take() else {
            return false;
        };
        self.emit(
            ts,
            EventKind::QuizAnswer {
                along_m: self.tracks[q.poi].along,
                quiz_id: q.id,
                poi_id: self.poi_id(q.poi),
                correct: false,
                answered: false,
                choice: None,
            },
        );
        true
    }

    /// Answers the open quiz. A wrong choice is followed by the instruction
    /// that the quiz withheld.
    pub fn answer_quiz(&mut self, quiz_id: &str, choice: &AssetId, ts_ms: i64) -> Result<Vec<TrainingEvent>, EngineError> {
        self.check_op(ts_ms)?;
        let q = self.quiz.as_ref().ok_or(EngineError::NoOpenQuiz)?;
        if q.id != quiz_id {
            return Err(EngineError::QuizMismatch {
                open: q.id.clone(),
                got: quiz_id.to_owned(),
            });
        }
        if !q.choices.contains(choice) {
            return Err(EngineError::InvalidChoice(choice.clone()));
        }
        let q = self.quiz.take().expect("checked above");
        let start = self.events.len();
        self.last_ts_ms = ts_ms;
        let correct = *choice == q.correct;
        let along = self.tracks[q.poi].along;
        self.emit(
            ts_ms,
            EventKind::QuizAnswer {
                along_m: along,
                quiz_id: q.id,
                poi_id: self.poi_id(q.poi),
                correct,
                answered: true,
                choice: Some(choice.clone()),
            },
        );
        if !correct {
            let content = self.payload(q.poi);
            self.emit(
                ts_ms,
                EventKind::Instruction {
                    along_m: along,
                    poi_id: self.poi_id(q.poi),
                    fallback: true,
                    content,
                },
            );
        }
        Ok(self.since(start))
    }

    /// Emits `SignalLost` as soon as the gap is noticed, before the next fix.
    pub fn check_signal(&mut self, now_ms: i64) -> Result<Vec<TrainingEvent>, EngineError> {
        self.check_op(now_ms)?;
        let start = self.events.len();
        if let Some(prev) = self.last_fix {
            if !self.signal_lost && now_ms - prev.ts_ms > self.config.thresholds.signal_gap_ms {
                self.signal_lost = true;
                self.last_ts_ms = now_ms;
                self.emit(
                    now_ms,
                    EventKind::SignalLost {
                        along_m: self.watermark,
                        last_fix_ts_ms: prev.ts_ms,
                    },
                );
            }
        }
        Ok(self.since(start))
    }

    pub fn report_unexpected(
        &mut self,
        kind: UnexpectedKind,
        note: Option<String>,
        ts_ms: i64,
    ) -> Result<Vec<TrainingEvent>, EngineError> {
        self.check_op(ts_ms)?;
        let start = self.events.len();
        self.last_ts_ms = ts_ms;
        let along = self.watermark;
        self.emit(ts_ms, EventKind::UnexpectedReport { along_m: along, kind, note });
        self.emit(
            ts_ms,
            EventKind::RecoveryPrompt {
                along_m: along,
                options: vec![RecoveryOption::BackOnTrack, RecoveryOption::Help],
                guidance: None,
            },
        );
        Ok(self.since(start))
    }

    /// The trainee asks for help; the session stays active.
    pub fn request_help(&mut self, reason: Option<String>, ts_ms: i64) -> Result<Vec<TrainingEvent>, EngineError> {
        self.check_op(ts_ms)?;
        let start = self.events.len();
        self.last_ts_ms = ts_ms;
        self.emit(ts_ms, EventKind::HelpRequest { along_m: self.watermark, reason });
        Ok(self.since(start))
    }

    /// Records a trainer intervention. Closes an open off-track episode as
    /// assisted.
    pub fn log_assist(
        &mut self,
        source: AssistSource,
        note: Option<String>,
        ts_ms: i64,
    ) -> Result<Vec<TrainingEvent>, EngineError> {
        self.check_op(ts_ms)?;
        let supervision = self.config.supervision;
        let allowed = matches!(
            (source, supervision),
            (AssistSource::InPersonTrainer, Supervision::InPerson) | (AssistSource::RemoteTrainer, Supervision::Remote)
        );
        if !allowed {
            return Err(EngineError::Role { assist: source, supervision });
        }
        let start = self.events.len();
        self.last_ts_ms = ts_ms;
        let along = self.watermark;
        let attributed = self.attribute(along).map(|i| self.poi_id(i));
        self.emit(
            ts_ms,
            EventKind::AssistLogged {
                along_m: along,
                source,
                note,
                attributed_poi: attributed,
            },
        );
        if let Some(ep) = self.episode.take() {
            self.over_count = 0;
            self.rearm_pending = true;
            self.emit(
                ts_ms,
                EventKind::OffTrackEnd {
                    along_m: ep.begin_along,
                    resolution: EpisodeEnd::Assisted,
                },
            );
        }
        Ok(self.since(start))
    }

    pub fn activate_ar(&mut self, poi_id: Option<PoiId>, ts_ms: i64) -> Result<Vec<TrainingEvent>, EngineError> {
        self.check_op(ts_ms)?;
        if !self.config.modalities.contains(&Modality::Ar) {
            return Err(EngineError::ArUnavailable);
        }
        let start = self.events.len();
        self.last_ts_ms = ts_ms;
        self.emit(ts_ms, EventKind::ArActivated { along_m: self.watermark, poi_id });
        Ok(self.since(start))
    }

    /// Ends the session and returns its immutable record. An open quiz is
    /// closed as unanswered and flagged on the end event.
    pub fn end_session(&mut self, confidence: Option<u8>, ts_ms: i64) -> Result<SessionRecord, EngineError> {
        self.check_op(ts_ms)?;
        if let Some(c) = confidence {
            if !(1..=5).contains(&c) {
                return Err(EngineError::InvalidConfidence(c));
            }
        }
        self.last_ts_ms = ts_ms;
        let unanswered = self.close_quiz(ts_ms);
        self.emit(
            ts_ms,
            EventKind::SessionEnd {
                along_m: self.watermark,
                confidence,
                ended_off_track: self.episode.is_some(),
                unanswered_quiz: unanswered,
            },
        );
        self.ended = true;
        Ok(SessionRecord {
            session_id: self.id.clone(),
            route_id: self.route.id().clone(),
            route_version: self.route.version(),
            way_id: self.route.way_id().clone(),
            route_length_m: self.route.length_m(),
            subpaths: self.route.subpaths().to_vec(),
            config: self.config.clone(),
            consent_ref: self.consent_ref.clone(),
            started_ts_ms: self.started_ts_ms,
            ended_ts_ms: ts_ms,
            confidence,
            events: self.events.clone(),
            fixes: self.fixes.clone(),
        })
    }
}

/// Everything a finished session leaves behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    session_id: SessionId,
    route_id: RouteId,
    route_version: u32,
    way_id: WayId,
    route_length_m: f64,
    subpaths: Vec<SubPath>,
    config: TrainingConfig,
    consent_ref: String,
    started_ts_ms: i64,
    ended_ts_ms: i64,
    confidence: Option<u8>,
    events: Vec<TrainingEvent>,
    fixes: Vec<GpsFix>,
}

impl SessionRecord {
    /// A record assembled from an externally produced log, e.g. for replay
    /// or for exercising the indicator code.
    #[allow(clippy::too_many_arguments)]
    pub fn from_log(
        session_id: SessionId,
        route_id: RouteId,
        route_version: u32,
        way_id: WayId,
        route_length_m: f64,
        subpaths: Vec<SubPath>,
        config: TrainingConfig,
        events: Vec<TrainingEvent>,
    ) -> Self {
        let started = events.first().map_or(0, |e| e.ts_ms);
        let ended = events.last().map_or(0, |e| e.ts_ms);
        let confidence = events.iter().rev().find_map(|e| match e.kind {
            EventKind::SessionEnd { confidence, .. } => confidence,
            _ => None,
        });
        Self {
            session_id,
            route_id,
            route_version,
            way_id,
            route_length_m,
            subpaths,
            config,
            consent_ref: String::new(),
            started_ts_ms: started,
            ended_ts_ms: ended,
            confidence,
            events,
            fixes: Vec::new(),
        }
    }

    pub fn session_id(&self) -> &SessionId {
        &self.session_id
    }

    pub fn route_id(&self) -> &RouteId {
        &self.route_id
    }

    pub fn route_version(&self) -> u32 {
        self.route_version
    }

    pub fn way_id(&self) -> &WayId {
        &self.way_id
    }

    pub fn route_length_m(&self) -> f64 {
        self.route_length_m
    }

    pub fn subpaths(&self) -> &[SubPath] {
        &self.subpaths
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn consent_ref(&self) -> &str {
        &self.consent_ref
    }

    pub fn started_ts_ms(&self) -> i64 {
        self.started_ts_ms
    }

    pub fn ended_ts_ms(&self) -> i64 {
        self.ended_ts_ms
    }

    pub fn confidence(&self) -> Option<u8> {
        self.confidence
    }

    pub fn events(&self) -> &[TrainingEvent] {
        &self.events
    }

    pub fn fixes(&self) -> &[GpsFix] {
        &self.fixes
    }

    pub fn events_ndjson(&self) -> String {
        events_to_ndjson(&self.events)
    }
}
