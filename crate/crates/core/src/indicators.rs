//! Progress indicators computed from session event logs, learning trends
//! across sessions, and advisory adaptation suggestions.
//!
//! Counters:
//! - `D` landmark vicinity alerts, `entries` all vicinity alerts
//! - `C` alerted landmarks with no attributed mistake, wrong quiz answer or assist
//! - `A` assists, AR activations and fallback instructions
//! - `O` off-track episodes, `Rs` episodes that ended without assistance
//! - `U` unexpected-situation reports, `L` route (or sub-path) length in km
//!
//! accuracy = C/D, autonomy = 1 - min(1, A/max(1, entries)),
//! error rate = (D - C + O + U)/L, recovery = Rs/O. Ratios with a zero
//! denominator are undefined rather than 0 or 1.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::RouteEdit;
use crate::engine::{EpisodeEnd, EventKind, SessionRecord, Supervision, TrainingEvent};
use crate::ids::{PoiId, RouteId, SessionId, WayId};
use crate::route::{subpath_index, PoiKind, SupportMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndicatorError {
    #[error("event log integrity ({flag}): {detail}")]
    Integrity { flag: String, detail: String },
    #[error("no session records")]
    Empty,
    #[error("sessions belong to different ways: {0} and {1}")]
    MixedWays(WayId, WayId),
}

fn integrity(flag: &str, detail: impl Into<String>) -> IndicatorError {
    IndicatorError::Integrity {
        flag: flag.to_owned(),
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    #[serde(rename = "D")]
    pub decision_points: u32,
    #[serde(rename = "C")]
    pub correct: u32,
    #[serde(rename = "A")]
    pub assists: u32,
    #[serde(rename = "O")]
    pub off_track: u32,
    #[serde(rename = "Rs")]
    pub self_recoveries: u32,
    #[serde(rename = "U")]
    pub user_reports: u32,
    pub entries: u32,
    #[serde(rename = "L")]
    pub length_km: f64,
}

impl Counters {
    pub fn accuracy(&self) -> Option<f64> {
        (self.decision_points > 0).then(|| self.correct as f64 / self.decision_points as f64)
    }

    pub fn autonomy(&self) -> f64 {
        1.0 - (self.assists as f64 / self.entries.max(1) as f64).min(1.0)
    }

    pub fn error_rate_per_km(&self) -> f64 {
        let errors = (self.decision_points - self.correct) + self.off_track + self.user_reports;
        errors as f64 / self.length_km
    }

    pub fn recovery(&self) -> Option<f64> {
        (self.off_track > 0).then(|| self.self_recoveries as f64 / self.off_track as f64)
    }

    fn add(&mut self, other: &Counters) {
        self.decision_points += other.decision_points;
        self.correct += other.correct;
        self.assists += other.assists;
        self.off_track += other.off_track;
        self.self_recoveries += other.self_recoveries;
        self.user_reports += other.user_reports;
        self.entries += other.entries;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSet {
    pub autonomy: f64,
    pub accuracy: Option<f64>,
    pub error_rate_per_km: f64,
    pub recovery: Option<f64>,
    pub confidence: Option<u8>,
    pub counters: Counters,
    pub flags: Vec<String>,
}

impl IndicatorSet {
    fn from_counters(counters: Counters, confidence: Option<u8>) -> Self {
        let mut flags = Vec::new();
        if counters.decision_points == 0 {
            flags.push("accuracy-undefined".to_owned());
        }
        if counters.off_track == 0 {
            flags.push("recovery-undefined".to_owned());
        }
        Self {
            autonomy: counters.autonomy(),
            accuracy: counters.accuracy(),
            error_rate_per_km: counters.error_rate_per_km(),
            recovery: counters.recovery(),
            confidence,
            counters,
            flags,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubPathIndicators {
    pub index: usize,
    pub start_m: f64,
    pub end_m: f64,
    pub mode: SupportMode,
    #[serde(flatten)]
    pub indicators: IndicatorSet,
}

/// Checks episode pairing and returns the landmarks charged with a mistake.
fn scan(events: &[TrainingEvent]) -> Result<(BTreeSet<PoiId>, bool), IndicatorError> {
    let mut dirty = BTreeSet::new();
    let mut open = false;
    let mut ended_off_track = None;
    for e in events {
        match &e.kind {
            EventKind::OffTrackBegin { attributed_poi, .. } => {
                if open {
                    return Err(integrity("unpaired-episode", format!("second OffTrackBegin at seq {}", e.seq)));
                }
                open = true;
                dirty.extend(attributed_poi.iter().cloned());
            }
            EventKind::OffTrackEnd { .. } => {
                if !open {
                    return Err(integrity("unpaired-episode", format!("OffTrackEnd without begin at seq {}", e.seq)));
                }
                open = false;
            }
            EventKind::QuizAnswer {
                answered: true,
                correct: false,
                poi_id,
                ..
            }
            | EventKind::MistakeAlert { poi_id, .. } => {
                dirty.insert(poi_id.clone());
            }
            EventKind::AssistLogged {
                attributed_poi: Some(p), ..
            } => {
                dirty.insert(p.clone());
            }
            EventKind::SessionEnd { ended_off_track: flag, .. } => ended_off_track = Some(*flag),
            _ => {}
        }
    }
    match ended_off_track {
        None => Err(integrity("incomplete", "log has no SessionEnd")),
        Some(flag) if open && !flag => Err(integrity("unpaired-episode", "episode still open at session end")),
        Some(flag) => Ok((dirty, flag)),
    }
}

/// Adds one event's contribution to `c`.
fn count(c: &mut Counters, kind: &EventKind, dirty: &BTreeSet<PoiId>) {
    match kind {
        EventKind::VicinityAlert { poi_id, poi_kind, .. } => {
            c.entries += 1;
            if *poi_kind == PoiKind::Landmark {
                c.decision_points += 1;
                if !dirty.contains(poi_id) {
                    c.correct += 1;
                }
            }
        }
        EventKind::AssistLogged { .. } | EventKind::ArActivated { .. } => c.assists += 1,
        EventKind::Instruction { fallback: true, .. } => c.assists += 1,
        EventKind::OffTrackBegin { .. } => c.off_track += 1,
        EventKind::OffTrackEnd {
            resolution: EpisodeEnd::SelfRecovered,
            ..
        } => c.self_recoveries += 1,
        EventKind::UnexpectedReport { .. } => c.user_reports += 1,
        _ => {}
    }
}

fn check_length(len_m: f64) -> Result<(), IndicatorError> {
    if len_m > 0.0 && len_m.is_finite() {
        Ok(())
    } else {
        Err(integrity("zero-length", format!("route length {len_m} m")))
    }
}

pub fn compute_indicators(record: &SessionRecord) -> Result<IndicatorSet, IndicatorError> {
    check_length(record.route_length_m())?;
    let (dirty, ended_off_track) = scan(record.events())?;
    let mut c = Counters {
        length_km: record.route_length_m() / 1000.0,
        ..Counters::default()
    };
    for e in record.events() {
        count(&mut c, &e.kind, &dirty);
    }
    let mut set = IndicatorSet::from_counters(c, record.confidence());
    if ended_off_track {
        set.flags.push("ended-off-track".to_owned());
    }
    Ok(set)
}

/// Per-sub-path indicators. Each event counts toward the sub-path that
/// contains its `along_m`, so counters sum to the session counters.
pub fn subpath_breakdown(record: &SessionRecord) -> Result<Vec<SubPathIndicators>, IndicatorError> {
    let subpaths = record.subpaths();
    if subpaths.is_empty() {
        return Err(integrity("no-subpaths", "record has no sub-paths"));
    }
    let (dirty, _) = scan(record.events())?;
    let mut rows: Vec<Counters> = subpaths
        .iter()
        .map(|s| Counters {
            length_km: s.length_m() / 1000.0,
            ..Counters::default()
        })
        .collect();
    for sp in subpaths {
        check_length(sp.length_m())?;
    }
    for e in record.events() {
        let along = e.kind.along_m();
        let i = subpath_index(subpaths, along)
            .ok_or_else(|| integrity("out-of-route", format!("event {} at {along} m", e.seq)))?;
        count(&mut rows[i], &e.kind, &dirty);
    }
    Ok(rows
        .into_iter()
        .zip(subpaths)
        .enumerate()
        .map(|(index, (c, sp))| SubPathIndicators {
            index,
            start_m: sp.start_m,
            end_m: sp.end_m,
            mode: sp.mode,
            indicators: IndicatorSet::from_counters(c, None),
        })
        .collect())
}

/// Sums sub-path rows back into session counters.
pub fn total_counters(rows: &[SubPathIndicators]) -> Counters {
    let mut total = Counters::default();
    for r in rows {
        total.add(&r.indicators.counters);
        total.length_km += r.indicators.counters.length_km;
    }
    total
}

/// The report served for a single session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorReport {
    pub session_id: SessionId,
    pub route_id: RouteId,
    pub route_version: u32,
    pub autonomy: f64,
    pub accuracy: Option<f64>,
    pub error_rate_per_km: f64,
    pub recovery: Option<f64>,
    pub confidence: Option<u8>,
    pub counters: Counters,
    pub subpaths: Vec<SubPathIndicators>,
    pub flags: Vec<String>,
}

pub fn indicator_report(record: &SessionRecord) -> Result<IndicatorReport, IndicatorError> {
    let set = compute_indicators(record)?;
    let subpaths = subpath_breakdown(record)?;
    Ok(IndicatorReport {
        session_id: record.session_id().clone(),
        route_id: record.route_id().clone(),
        route_version: record.route_version(),
        autonomy: set.autonomy,
        accuracy: set.accuracy,
        error_rate_per_km: set.error_rate_per_km,
        recovery: set.recovery,
        confidence: set.confidence,
        counters: set.counters,
        subpaths,
        flags: set.flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub session_id: SessionId,
    pub route_id: RouteId,
    pub route_version: u32,
    pub supervision: Supervision,
    pub started_ts_ms: i64,
    pub indicators: IndicatorSet,
    pub subpaths: Vec<SubPathIndicators>,
}

/// Change between two consecutive sessions. Undefined on either side gives
/// an undefined delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendDelta {
    pub from: SessionId,
    pub to: SessionId,
    pub autonomy: f64,
    pub accuracy: Option<f64>,
    pub error_rate_per_km: f64,
    pub recovery: Option<f64>,
    pub confidence: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub way_id: WayId,
    pub series: Vec<TrendPoint>,
    pub deltas: Vec<TrendDelta>,
    #[serde(default)]
    pub suggestions: Vec<AdaptationSuggestion>,
}

fn opt_delta(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(b? - a?)
}

/// Orders the sessions by start time and computes per-session indicators
/// and deltas. Sessions on different route versions of the same way are
/// all included, each annotated with its version.
pub fn learning_trend(records: &[SessionRecord]) -> Result<TrendReport, IndicatorError> {
    let first = records.first().ok_or(IndicatorError::Empty)?;
    if let Some(other) = records.iter().find(|r| r.way_id() != first.way_id()) {
        return Err(IndicatorError::MixedWays(first.way_id().clone(), other.way_id().clone()));
    }
    let mut sorted: Vec<&SessionRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.started_ts_ms());
    let series = sorted
        .iter()
        .map(|r| {
            Ok(TrendPoint {
                session_id: r.session_id().clone(),
                route_id: r.route_id().clone(),
                route_version: r.route_version(),
                supervision: r.config().supervision,
                started_ts_ms: r.started_ts_ms(),
                indicators: compute_indicators(r)?,
                subpaths: subpath_breakdown(r)?,
            })
        })
        .collect::<Result<Vec<_>, IndicatorError>>()?;
    let deltas = series
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0].indicators, &w[1].indicators);
            TrendDelta {
                from: w[0].session_id.clone(),
                to: w[1].session_id.clone(),
                autonomy: b.autonomy - a.autonomy,
                accuracy: opt_delta(a.accuracy, b.accuracy),
                error_rate_per_km: b.error_rate_per_km - a.error_rate_per_km,
                recovery: opt_delta(a.recovery, b.recovery),
                confidence: a.confidence.zip(b.confidence).map(|(x, y)| y as i32 - x as i32),
            }
        })
        .collect();
    Ok(TrendReport {
        way_id: first.way_id().clone(),
        series,
        deltas,
        suggestions: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationPolicy {
    pub advance_accuracy: f64,
    pub regress_accuracy: f64,
    /// Consecutive clean sessions needed before advancing.
    pub consecutive_sessions: usize,
}

impl Default for AdaptationPolicy {
    fn default() -> Self {
        Self {
            advance_accuracy: 0.9,
            regress_accuracy: 0.5,
            consecutive_sessions: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Advance,
    Regress,
}

/// A suggestion for the trainer. Nothing applies it automatically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdaptationSuggestion {
    SubPathMode {
        route_id: RouteId,
        route_version: u32,
        subpath_index: usize,
        from: SupportMode,
        to: SupportMode,
        direction: Direction,
        rationale: String,
    },
    Supervision {
        route_id: RouteId,
        from: Supervision,
        to: Supervision,
        rationale: String,
    },
}

impl AdaptationSuggestion {
    /// The curation edit a trainer would submit to accept the suggestion.
    pub fn as_edit(&self) -> Option<RouteEdit> {
        match self {
            AdaptationSuggestion::SubPathMode { subpath_index, to, .. } => Some(RouteEdit::SetSubPathMode {
                index: *subpath_index,
                mode: *to,
            }),
            AdaptationSuggestion::Supervision { .. } => None,
        }
    }
}

/// Suggests one-rung mode changes per sub-path based on the latest
/// sessions of the most recent route version, and a supervision step-down
/// once every sub-path has reached Reward or beyond without regressions.
pub fn recommend_adaptation(trend: &TrendReport, policy: &AdaptationPolicy) -> Vec<AdaptationSuggestion> {
    let Some(latest) = trend.series.last() else {
        return Vec::new();
    };
    let trailing: Vec<&TrendPoint> = trend
        .series
        .iter()
        .rev()
        .take_while(|p| p.route_id == latest.route_id && p.route_version == latest.route_version)
        .collect();
    let k = policy.consecutive_sessions.max(1);
    let mut out = Vec::new();
    let mut regressed = false;
    for (i, row) in latest.subpaths.iter().enumerate() {
        let advance = trailing.len() >= k
            && trailing[..k].iter().all(|p| {
                p.subpaths.get(i).is_some_and(|r| {
                    let r = &r.indicators;
                    r.accuracy.is_some_and(|a| a >= policy.advance_accuracy) && r.counters.off_track == 0
                })
            });
        let regress = row.indicators.accuracy.is_some_and(|a| a < policy.regress_accuracy);
        let (to, direction, rationale) = if regress {
            regressed = true;
            match row.mode.prev() {
                Some(to) => (to, Direction::Regress, format!("accuracy below {} in the latest session", policy.regress_accuracy)),
                None => continue,
            }
        } else if advance {
            match row.mode.next() {
                Some(to) => (
                    to,
                    Direction::Advance,
                    format!("accuracy at least {} with no off-track episodes in {k} consecutive sessions", policy.advance_accuracy),
                ),
                None => continue,
            }
        } else {
            continue;
        };
        out.push(AdaptationSuggestion::SubPathMode {
            route_id: latest.route_id.clone(),
            route_version: latest.route_version,
            subpath_index: i,
            from: row.mode,
            to,
            direction,
            rationale,
        });
    }
    let all_reward = latest.subpaths.iter().all(|r| r.mode.rung() >= SupportMode::Reward.rung());
    if all_reward && !regressed {
        if let Some(to) = latest.supervision.step_down() {
            out.push(AdaptationSuggestion::Supervision {
                route_id: latest.route_id.clone(),
                from: latest.supervision,
                to,
                rationale: "every sub-path is at Reward or beyond".to_owned(),
            });
        }
    }
    out
}

/// Convenience wrapper: trend plus suggestions.
pub fn trend_report(records: &[SessionRecord], policy: &AdaptationPolicy) -> Result<TrendReport, IndicatorError> {
    let mut trend = learning_trend(records)?;
    trend.suggestions = recommend_adaptation(&trend, policy);
    Ok(trend)
}
