//! Deterministic synthetic walks and an end-to-end driver that feeds them
//! through a training session.
//!
//! A walk is a timeline of pieces: stretches along the route, straight
//! excursions away from a landmark and back, and pauses. The timeline is
//! sampled every `fix_interval_s` and each sample gets isotropic Gaussian
//! noise (Box-Muller over ChaCha8). Ground truth is computed from the
//! noise-free positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::design::{start_negotiation, DesignError, NegotiationAction};
use crate::engine::{begin_session, EngineError, EventKind, SessionRecord, TrainingConfig, DEFAULT_OFF_TRACK_M};
use crate::geo::{
    destination_point, haversine_distance, project_onto_polyline, trace_to_csv_string, read_trace_csv,
    GeoError, GeoPoint, GpsFix, LocalFrame, Polyline,
};
use crate::ids::{PoiId, RouteId, SessionId};
use crate::privacy::{ConsentLedger, ConsentScope};
use crate::route::{Instruction, Poi, PoiKind, RouteDefinition, RouteStatus};

pub const PRNG_ID: &str = "chacha8-boxmuller-v1";
pub const DEFAULT_START_TS_MS: i64 = 1_760_000_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid walker profile: {0}")]
    Profile(String),
    #[error("behaviors overlap along the route: {0}")]
    Overlap(String),
    #[error("route must be working, found {0:?}")]
    RouteStatus(RouteStatus),
    #[error("malformed walk file: {0}")]
    WalkFile(String),
    #[error("could not generate a route for seed {0}")]
    Synthesis(u64),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Behavior {
    /// Leaves the route at decision point `landmark` (0-based, in route
    /// order) and walks `length_m` straight on `bearing_deg`, or straight
    /// ahead when no bearing is given.
    WrongTurn {
        landmark: usize,
        #[serde(default)]
        bearing_deg: Option<f64>,
        length_m: f64,
    },
    /// Walks back to where the preceding wrong turn started. Without it the
    /// walk ends at the far end of the excursion.
    ReturnToRoute,
    Pause { at_m: f64, duration_s: f64 },
    /// No fixes while the walker is between these route positions.
    SignalLoss { from_m: f64, to_m: f64 },
    /// Walks parallel to the route at a fixed lateral offset (positive to
    /// the right).
    LateralDrift { from_m: f64, to_m: f64, offset_m: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", content = "answers")]
pub enum QuizPolicy {
    #[default]
    AlwaysCorrect,
    AlwaysWrong,
    /// The n-th quiz is answered correctly when the n-th entry is true;
    /// quizzes past the end of the list are left unanswered.
    Scripted(Vec<bool>),
}

fn default_interval() -> f64 {
    1.0
}

fn default_start() -> i64 {
    DEFAULT_START_TS_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkerProfile {
    pub speed_mps: f64,
    #[serde(default = "default_interval")]
    pub fix_interval_s: f64,
    #[serde(default)]
    pub gps_noise_sigma_m: f64,
    #[serde(default)]
    pub behaviors: Vec<Behavior>,
    #[serde(default)]
    pub quiz_policy: QuizPolicy,
    #[serde(default = "default_start")]
    pub start_ts_ms: i64,
    #[serde(default)]
    pub self_report: Option<u8>,
}

impl WalkerProfile {
    /// 1.4 m/s, one fix per second, no noise, no behaviors.
    pub fn clean() -> Self {
        Self {
            speed_mps: 1.4,
            fix_interval_s: 1.0,
            gps_noise_sigma_m: 0.0,
            behaviors: Vec::new(),
            quiz_policy: QuizPolicy::AlwaysCorrect,
            start_ts_ms: DEFAULT_START_TS_MS,
            self_report: None,
        }
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("profile serializes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkHeader {
    pub route_id: RouteId,
    pub route_version: u32,
    pub profile_sha256: String,
    pub seed: u64,
    pub prng: String,
    pub fix_count: usize,
}

/// A stretch of fixes whose noise-free position is at least the default
/// off-track distance from the route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueDeviation {
    pub first_fix: usize,
    pub last_fix: usize,
    pub start_ts_ms: i64,
    pub end_ts_ms: i64,
    pub peak_cross_track_m: f64,
    pub landmark: Option<PoiId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionOutcome {
    Correct,
    Wrong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTruth {
    pub poi_id: PoiId,
    pub along_m: f64,
    pub outcome: DecisionOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct WalkAnnotations {
    /// Noise-free cross-track distance of every emitted fix, measured
    /// against the whole route.
    pub true_cross_track_m: Vec<f64>,
    pub off_track: Vec<TrueDeviation>,
    pub decisions: Vec<DecisionTruth>,
    /// `[from_m, to_m, offset_m]` of each lateral drift.
    pub drifts: Vec<[f64; 3]>,
    /// `[last fix before, first fix after]` timestamps of each signal gap.
    pub signal_gaps: Vec<[i64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedWalk {
    pub header: WalkHeader,
    pub fixes: Vec<GpsFix>,
    pub annotations: WalkAnnotations,
}

impl ScriptedWalk {
    /// Header JSON line followed by the trace CSV.
    pub fn to_file_string(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        out.push_str(&trace_to_csv_string(&self.fixes));
        out
    }

    pub fn annotations_json(&self) -> String {
        serde_json::to_string_pretty(&self.annotations).expect("annotations serialize")
    }

    pub fn parse_file(text: &str) -> Result<(WalkHeader, Vec<GpsFix>), SimError> {
        let (first, rest) = text
            .split_once('\n')
            .ok_or_else(|| SimError::WalkFile("missing header line".into()))?;
        let header: WalkHeader = serde_json::from_str(first).map_err(|e| SimError::WalkFile(e.to_string()))?;
        let fixes = read_trace_csv(rest.as_bytes())?;
        if fixes.len() != header.fix_count {
            return Err(SimError::WalkFile(format!(
                "header promises {} fixes, body has {}",
                header.fix_count,
                fixes.len()
            )));
        }
        Ok((header, fixes))
    }
}

#[derive(Debug, Clone, Copy)]
enum Piece {
    Route { from: f64, to: f64 },
    Line { a: GeoPoint, b: GeoPoint, progress: f64 },
    Stay { at: GeoPoint, progress: f64, secs: f64 },
}

struct Excursion {
    landmark: usize,
    bearing: Option<f64>,
    length: f64,
    returns: bool,
}

enum Stop {
    Pause { at: f64, secs: f64 },
    Turn { at: f64, excursion: Excursion },
}

fn stop_at(s: &Stop) -> f64 {
    match s {
        Stop::Pause { at, .. } | Stop::Turn { at, .. } => *at,
    }
}

fn positive(v: f64, what: &str) -> Result<(), SimError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(SimError::Profile(format!("{what} must be positive, got {v}")))
    }
}

struct Plan {
    stops: Vec<Stop>,
    losses: Vec<(f64, f64)>,
    drifts: Vec<(f64, f64, f64)>,
}

/// Checks the profile against the route and orders its behaviors.
fn plan(route: &RouteDefinition, profile: &WalkerProfile) -> Result<Plan, SimError> {
    positive(profile.speed_mps, "speed")?;
    positive(profile.fix_interval_s, "fix interval")?;
    if !(profile.gps_noise_sigma_m >= 0.0 && profile.gps_noise_sigma_m.is_finite()) {
        return Err(SimError::Profile("noise sigma must be non-negative".into()));
    }
    if let Some(c) = profile.self_report {
        if !(1..=5).contains(&c) {
            return Err(SimError::Profile(format!("self report {c} outside 1..=5")));
        }
    }
    let len = route.length_m();
    let landmarks = landmark_alongs(route);
    let in_route = |v: f64, what: &str| {
        if (0.0..=len).contains(&v) {
            Ok(())
        } else {
            Err(SimError::Profile(format!("{what} {v} m is outside the route (0..{len:.1} m)")))
        }
    };

    let mut plan = Plan {
        stops: Vec::new(),
        losses: Vec::new(),
        drifts: Vec::new(),
    };
    // (start, end, label) for the overlap check
    let mut spans: Vec<(f64, f64, String)> = Vec::new();
    let mut terminal = false;
    let mut i = 0;
    let bs = &profile.behaviors;
    while i < bs.len() {
        match &bs[i] {
            Behavior::WrongTurn {
                landmark,
                bearing_deg,
                length_m,
            } => {
                positive(*length_m, "wrong-turn length")?;
                let (_, at) = landmarks.get(*landmark).ok_or_else(|| {
                    SimError::Profile(format!("route has {} decision points, no index {landmark}", landmarks.len()))
                })?;
                let returns = matches!(bs.get(i + 1), Some(Behavior::ReturnToRoute));
                if terminal {
                    return Err(SimError::Profile("a wrong turn without return must be the last behavior".into()));
                }
                terminal = !returns;
                spans.push((*at, *at, format!("wrong turn at decision point {landmark}")));
                plan.stops.push(Stop::Turn {
                    at: *at,
                    excursion: Excursion {
                        landmark: *landmark,
                        bearing: *bearing_deg,
                        length: *length_m,
                        returns,
                    },
                });
                if returns {
                    i += 1;
                }
            }
            Behavior::ReturnToRoute => {
                return Err(SimError::Profile("ReturnToRoute must directly follow a WrongTurn".into()));
            }
            Behavior::Pause { at_m, duration_s } => {
                in_route(*at_m, "pause")?;
                positive(*duration_s, "pause duration")?;
                spans.push((*at_m, *at_m, format!("pause at {at_m} m")));
                plan.stops.push(Stop::Pause {
                    at: *at_m,
                    secs: *duration_s,
                });
            }
            Behavior::SignalLoss { from_m, to_m } => {
                in_route(*from_m, "signal loss start")?;
                in_route(*to_m, "signal loss end")?;
                if from_m >= to_m {
                    return Err(SimError::Profile("signal loss must have from_m < to_m".into()));
                }
                spans.push((*from_m, *to_m, format!("signal loss {from_m}..{to_m} m")));
                plan.losses.push((*from_m, *to_m));
            }
            Behavior::LateralDrift { from_m, to_m, offset_m } => {
                in_route(*from_m, "drift start")?;
                in_route(*to_m, "drift end")?;
                if from_m >= to_m || !offset_m.is_finite() {
                    return Err(SimError::Profile("drift must have from_m < to_m and a finite offset".into()));
                }
                spans.push((*from_m, *to_m, format!("drift {from_m}..{to_m} m")));
                plan.drifts.push((*from_m, *to_m, *offset_m));
            }
        }
        i += 1;
    }
    for a in 0..spans.len() {
        for b in a + 1..spans.len() {
            let (x, y) = (&spans[a], &spans[b]);
            if x.0 <= y.1 && y.0 <= x.1 {
                return Err(SimError::Overlap(format!("{} and {}", x.2, y.2)));
            }
        }
    }
    plan.stops.sort_by(|a, b| stop_at(a).total_cmp(&stop_at(b)));
    if terminal {
        // nothing may lie beyond the walk's end
        let end = plan
            .stops
            .iter()
            .filter_map(|s| match s {
                Stop::Turn { at, excursion } if !excursion.returns => Some(*at),
                _ => None,
            })
            .next()
            .unwrap_or(len);
        if spans.iter().any(|s| s.0 > end) {
            return Err(SimError::Profile("behaviors after the final wrong turn are never reached".into()));
        }
    }
    Ok(plan)
}

/// Decision points with their along-track positions.
fn landmark_alongs(route: &RouteDefinition) -> Vec<(PoiId, f64)> {
    route
        .pois()
        .iter()
        .zip(route.poi_positions())
        .filter(|(p, _)| p.is_decision_point())
        .map(|(p, pos)| (p.id.clone(), pos.along_track))
        .collect()
}

/// Bearing that leads away from both segments meeting at `along_m`, so
/// that a walker leaving there is as far from the route as it has walked.
pub fn away_bearing(route: &RouteDefinition, along_m: f64) -> f64 {
    let g = route.geometry();
    let back = (g.bearing_at((along_m - 1.0).max(0.0)) + 180.0).to_radians();
    let fwd = g.bearing_at((along_m + 1.0).min(g.length())).to_radians();
    let (x, y) = (back.sin() + fwd.sin(), back.cos() + fwd.cos());
    if x.hypot(y) < 1e-9 {
        // straight route: step off to the side
        return (fwd.to_degrees() + 90.0).rem_euclid(360.0);
    }
    (-x).atan2(-y).to_degrees().rem_euclid(360.0)
}

/// Unit-variance normal pair.
fn box_muller(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Generates the fixes and ground truth for `profile` on `route`. Pure in
/// its arguments.
pub fn generate_trace(route: &RouteDefinition, profile: &WalkerProfile, seed: u64) -> Result<ScriptedWalk, SimError> {
    if route.status() != RouteStatus::Working {
        return Err(SimError::RouteStatus(route.status()));
    }
    let plan = plan(route, profile)?;
    let geometry = route.geometry();
    let len = route.length_m();
    let landmarks = landmark_alongs(route);

    let mut pieces = Vec::new();
    let mut decisions = Vec::new();
    let mut cursor = 0.0;
    let mut terminated = false;
    for stop in &plan.stops {
        let at = stop_at(stop);
        pieces.push(Piece::Route { from: cursor, to: at });
        cursor = at;
        match stop {
            Stop::Pause { secs, .. } => pieces.push(Piece::Stay {
                at: geometry.point_at(at),
                progress: at,
                secs: *secs,
            }),
            Stop::Turn { excursion, .. } => {
                let a = geometry.point_at(at);
                let bearing = excursion
                    .bearing
                    .unwrap_or_else(|| geometry.bearing_at((at - 1.0).max(0.0)));
                let b = destination_point(a, bearing, excursion.length);
                pieces.push(Piece::Line { a, b, progress: at });
                decisions.push((excursion.landmark, DecisionOutcome::Wrong));
                if excursion.returns {
                    pieces.push(Piece::Line { a: b, b: a, progress: at });
                } else {
                    terminated = true;
                    break;
                }
            }
        }
    }
    if !terminated {
        pieces.push(Piece::Route { from: cursor, to: len });
    }
    let reached = if terminated { cursor } else { len };
    let mut decision_truth: Vec<DecisionTruth> = landmarks
        .iter()
        .enumerate()
        .filter(|(_, (_, along))| *along <= reached)
        .map(|(k, (id, along))| DecisionTruth {
            poi_id: id.clone(),
            along_m: *along,
            outcome: decisions
                .iter()
                .find(|(i, _)| *i == k)
                .map_or(DecisionOutcome::Correct, |d| d.1),
        })
        .collect();
    decision_truth.sort_by(|a, b| a.along_m.total_cmp(&b.along_m));

    let speed = profile.speed_mps;
    let durations: Vec<f64> = pieces
        .iter()
        .map(|p| match p {
            Piece::Route { from, to } => (to - from) / speed,
            Piece::Line { a, b, .. } => haversine_distance(*a, *b) / speed,
            Piece::Stay { secs, .. } => *secs,
        })
        .collect();
    let total: f64 = durations.iter().sum();
    let dt = profile.fix_interval_s;
    let steps = (total / dt + 1e-9).floor() as u64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = profile.gps_noise_sigma_m;
    let mut fixes = Vec::new();
    let mut truth_cross = Vec::new();
    let mut truth_piece: Vec<Option<usize>> = Vec::new();
    let mut piece = 0;
    let mut piece_start = 0.0;
    for k in 0..=steps {
        let t = k as f64 * dt;
        while piece + 1 < pieces.len() && t > piece_start + durations[piece] {
            piece_start += durations[piece];
            piece += 1;
        }
        let local = (t - piece_start).max(0.0);
        let (point, progress, on_route) = match pieces[piece] {
            Piece::Route { from, to } => {
                let along = (from + local * speed).min(to);
                let mut p = geometry.point_at(along);
                if let Some(&(_, _, offset)) = plan.drifts.iter().find(|d| d.0 <= along && along <= d.1) {
                    p = destination_point(p, geometry.bearing_at(along) + 90.0, offset);
                }
                (p, along, true)
            }
            Piece::Line { a, b, progress } => {
                let frame = LocalFrame::at(a);
                let (bx, by) = frame.to_xy(b);
                let f = (local / durations[piece]).clamp(0.0, 1.0);
                (frame.from_xy(bx * f, by * f), progress, false)
            }
            Piece::Stay { at, progress, .. } => (at, progress, true),
        };
        let (zx, zy) = box_muller(&mut rng);
        if on_route && plan.losses.iter().any(|&(from, to)| from < progress && progress < to) {
            continue;
        }
        let noisy = LocalFrame::at(point).from_xy(sigma * zx, sigma * zy);
        let ts = profile.start_ts_ms + (t * 1000.0).round() as i64;
        let cross = project_onto_polyline(point, geometry, geometry.full_window())?.cross_track;
        fixes.push(GpsFix::new(noisy, ts));
        truth_cross.push(cross);
        truth_piece.push(match pieces[piece] {
            Piece::Line { progress, .. } => landmarks.iter().position(|(_, a)| *a == progress),
            _ => None,
        });
    }

    let mut off_track = Vec::new();
    let mut i = 0;
    while i < truth_cross.len() {
        if truth_cross[i] < DEFAULT_OFF_TRACK_M {
            i += 1;
            continue;
        }
        let first = i;
        while i < truth_cross.len() && truth_cross[i] >= DEFAULT_OFF_TRACK_M {
            i += 1;
        }
        let last = i - 1;
        off_track.push(TrueDeviation {
            first_fix: first,
            last_fix: last,
            start_ts_ms: fixes[first].ts_ms,
            end_ts_ms: fixes[last].ts_ms,
            peak_cross_track_m: truth_cross[first..=last].iter().copied().fold(0.0, f64::max),
            landmark: truth_piece[first].map(|k| landmarks[k].0.clone()),
        });
    }
    let signal_gaps = fixes
        .windows(2)
        .filter(|w| (w[1].ts_ms - w[0].ts_ms) as f64 > dt * 1000.0 + 0.5)
        .map(|w| [w[0].ts_ms, w[1].ts_ms])
        .collect();

    Ok(ScriptedWalk {
        header: WalkHeader {
            route_id: route.id().clone(),
            route_version: route.version(),
            profile_sha256: profile.sha256(),
            seed,
            prng: PRNG_ID.to_owned(),
            fix_count: fixes.len(),
        },
        fixes,
        annotations: WalkAnnotations {
            true_cross_track_m: truth_cross,
            off_track,
            decisions: decision_truth,
            drifts: plan.drifts.iter().map(|&(a, b, c)| [a, b, c]).collect(),
            signal_gaps,
        },
    })
}

pub fn sim_session_id(route: &RouteDefinition, seed: u64) -> SessionId {
    SessionId::new(format!("sim-{}-{seed}", route.id()))
}

/// Generates the walk and plays it through a training session, answering
/// quizzes according to the profile's policy.
pub fn run_simulation(
    route: &RouteDefinition,
    config: &TrainingConfig,
    profile: &WalkerProfile,
    seed: u64,
) -> Result<SessionRecord, SimError> {
    let walk = generate_trace(route, profile, seed)?;
    run_walk(route, config, profile, &walk.fixes, sim_session_id(route, seed))
}

/// Plays pre-generated fixes through a fresh session.
pub fn run_walk(
    route: &RouteDefinition,
    config: &TrainingConfig,
    profile: &WalkerProfile,
    fixes: &[GpsFix],
    session_id: SessionId,
) -> Result<SessionRecord, SimError> {
    let start = profile.start_ts_ms;
    let ledger = ConsentLedger::new();
    let consent = ledger
        .grant_consent(
            &"simulated-walker".into(),
            ConsentScope::TrainingTelemetry,
            "Simulated session: positions and events are recorded.",
            start,
        )
        .map_err(EngineError::from)?;
    let mut session = begin_session(route, config.clone(), Some(&consent), &ledger, session_id, start)?;
    let mut quizzes = 0usize;
    let mut last_ts = start;
    for fix in fixes {
        let events = session.ingest_fix(*fix)?;
        last_ts = fix.ts_ms;
        for e in events {
            let EventKind::QuizPrompt { quiz_id, poi_id, choices, .. } = e.kind else {
                continue;
            };
            let correct = route.poi(&poi_id).and_then(|p| p.primary_photo()).cloned();
            let want_correct = match &profile.quiz_policy {
                QuizPolicy::AlwaysCorrect => Some(true),
                QuizPolicy::AlwaysWrong => Some(false),
                QuizPolicy::Scripted(list) => list.get(quizzes).copied(),
            };
            quizzes += 1;
            let Some(want) = want_correct else {
                continue;
            };
            let pick = choices
                .iter()
                .find(|c| (Some(*c) == correct.as_ref()) == want)
                .or(choices.first())
                .cloned();
            if let Some(choice) = pick {
                session.answer_quiz(&quiz_id, &choice, fix.ts_ms)?;
            }
        }
    }
    Ok(session.end_session(profile.self_report, last_ts)?)
}

/// Confirms every POI of a draft in one negotiation pass: the first photo
/// becomes primary and landmark instructions are approved.
pub fn auto_negotiate(draft: &RouteDefinition) -> Result<RouteDefinition, SimError> {
    let mut neg = start_negotiation(format!("{}-auto", draft.id()), draft)?;
    for _ in 0..draft.pois().len() {
        let poi = neg.current_poi().clone();
        if let Some(photo) = poi.photos.first() {
            neg.step(NegotiationAction::SelectPhoto(photo.clone()), 0)?;
        }
        if poi.kind == PoiKind::Landmark {
            neg.step(NegotiationAction::ApproveInstruction, 0)?;
        }
        neg.step(NegotiationAction::Confirm, 0)?;
        neg.step(NegotiationAction::Next, 0)?;
    }
    Ok(neg.finalize()?)
}

/// Shape of generated routes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    pub min_length_m: f64,
    pub max_length_m: f64,
    pub min_pois: usize,
    pub max_pois: usize,
    pub min_turn_deg: f64,
    pub max_turn_deg: f64,
    pub min_segment_m: f64,
    /// Minimum distance between non-adjacent segments.
    pub min_separation_m: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            min_length_m: 1000.0,
            max_length_m: 3000.0,
            min_pois: 3,
            max_pois: 8,
            min_turn_deg: 20.0,
            max_turn_deg: 100.0,
            min_segment_m: 150.0,
            min_separation_m: 100.0,
        }
    }
}

fn segment_distance(p: (f64, f64), q: (f64, f64), r: (f64, f64), s: (f64, f64)) -> f64 {
    fn point_seg(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let l2 = dx * dx + dy * dy;
        let t = if l2 == 0.0 {
            0.0
        } else {
            (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / l2).clamp(0.0, 1.0)
        };
        ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let d1 = cross(r, s, p);
    let d2 = cross(r, s, q);
    let d3 = cross(p, q, r);
    let d4 = cross(p, q, s);
    if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
        return 0.0;
    }
    point_seg(p, r, s)
        .min(point_seg(q, r, s))
        .min(point_seg(r, p, q))
        .min(point_seg(s, p, q))
}

/// A random working route: landmarks at the turns, reassurances between
/// them, all POIs confirmed. Deterministic in `seed`.
pub fn synth_route(seed: u64, opts: &SynthOptions) -> Result<RouteDefinition, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let route_id = format!("synth-{seed}");
    for _ in 0..2000 {
        let turns = rng.random_range(2..=(opts.max_pois - 1).max(2).min(5));
        let segments = turns + 1;
        let max_seg = (opts.max_length_m / segments as f64).max(opts.min_segment_m);
        let lengths: Vec<f64> = (0..segments)
            .map(|_| rng.random_range(opts.min_segment_m..=max_seg))
            .collect();
        let total: f64 = lengths.iter().sum();
        if total < opts.min_length_m || total > opts.max_length_m {
            continue;
        }
        let origin = GeoPoint {
            lat: 48.0 + rng.random_range(-0.5..0.5),
            lon: 11.0 + rng.random_range(-0.5..0.5),
        };
        let mut heading: f64 = rng.random_range(0.0..360.0);
        let mut vertices = vec![origin];
        let mut turn_dirs = Vec::new();
        for (i, l) in lengths.iter().enumerate() {
            if i > 0 {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mag = if opts.max_turn_deg > opts.min_turn_deg {
                    rng.random_range(opts.min_turn_deg..=opts.max_turn_deg)
                } else {
                    opts.min_turn_deg
                };
                heading = (heading + sign * mag).rem_euclid(360.0);
                turn_dirs.push(sign > 0.0);
            }
            let last = *vertices.last().expect("non-empty");
            vertices.push(destination_point(last, heading, *l));
        }
        let frame = LocalFrame::at(origin);
        let xy: Vec<(f64, f64)> = vertices.iter().map(|v| frame.to_xy(*v)).collect();
        let separated = (0..segments).all(|a| {
            (a + 2..segments).all(|b| segment_distance(xy[a], xy[a + 1], xy[b], xy[b + 1]) >= opts.min_separation_m)
        });
        if !separated {
            continue;
        }
        let geometry = Polyline::new(vertices.clone())?;
        let len = geometry.length();
        let cumulative = geometry.cumulative().to_vec();

        // at least one reassurance, at most three, within the POI budget
        let room = opts.max_pois.saturating_sub(turns);
        let lo = opts.min_pois.saturating_sub(turns).max(1);
        if lo > room {
            continue;
        }
        let extra = rng.random_range(lo..=room.min(3).max(lo));
        let mut alongs: Vec<f64> = cumulative[1..=turns].to_vec();
        let mut reassurances = Vec::new();
        let mut tries = 0;
        while reassurances.len() < extra && tries < 500 {
            tries += 1;
            let a = rng.random_range(50.0..len - 50.0);
            if alongs.iter().any(|b| (a - b).abs() < 70.0) {
                continue;
            }
            alongs.push(a);
            reassurances.push(a);
        }
        if reassurances.len() < extra {
            continue;
        }

        let mut pois = Vec::new();
        for (k, right) in turn_dirs.iter().enumerate() {
            let side = if *right { "right" } else { "left" };
            pois.push(
                Poi::new(format!("{route_id}-l{k}"), vertices[k + 1], 0, PoiKind::Landmark)
                    .with_photos([format!("{route_id}-l{k}-a"), format!("{route_id}-l{k}-b")])
                    .with_instruction(Instruction::text(format!("turn {side} at landmark {k}")).with_symbol(side)),
            );
        }
        for (k, a) in reassurances.iter().enumerate() {
            let offset = rng.random_range(-5.0..=5.0);
            let at = destination_point(geometry.point_at(*a), geometry.bearing_at(*a) + 90.0, offset);
            pois.push(
                Poi::new(format!("{route_id}-r{k}"), at, 0, PoiKind::Reassurance)
                    .with_photos([format!("{route_id}-r{k}-a")]),
            );
        }
        let draft = RouteDefinition::draft(route_id.as_str(), format!("synth-way-{seed}"), geometry, pois);
        return auto_negotiate(&draft);
    }
    Err(SimError::Synthesis(seed))
}
