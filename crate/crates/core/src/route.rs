//! Training domain model: ways, POIs, sub-paths and route definitions.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{project_onto_polyline, GeoPoint, Polyline, ProjectedPosition};
use crate::ids::{AssetId, PoiId, RouteId, UserId, WayId};

/// POIs farther than this from the path are rejected.
pub const MAX_POI_OFF_PATH_M: f64 = 30.0;
pub const DEFAULT_GEOFENCE_RADIUS_M: f64 = 25.0;
pub const MIN_GEOFENCE_RADIUS_M: f64 = 10.0;
pub const MAX_GEOFENCE_RADIUS_M: f64 = 60.0;

/// Slack for comparing sub-path boundaries and route length.
pub const BOUNDARY_EPS_M: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RouteError {
    #[error("route is invalid: {0}")]
    Invalid(ValidationReport),
    #[error("position {along_m} m is outside the route [0, {length_m}]")]
    OutOfRange { along_m: f64, length_m: f64 },
    #[error("route has no sub-paths")]
    NoSubPaths,
    #[error("sub-path edit rejected: {0}")]
    SubPathEdit(String),
}

/// A directional origin-to-destination connection. The reverse direction is
/// a different way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Way {
    pub id: WayId,
    pub origin_label: String,
    pub origin: GeoPoint,
    pub destination_label: String,
    pub destination: GeoPoint,
    pub owner_user_id: UserId,
    #[serde(default)]
    pub direction_note: String,
}

impl Way {
    /// The opposite direction, as a new way with its own id.
    pub fn reversed(&self, id: WayId) -> Way {
        Way {
            id,
            origin_label: self.destination_label.clone(),
            origin: self.destination,
            destination_label: self.origin_label.clone(),
            destination: self.origin,
            owner_user_id: self.owner_user_id.clone(),
            direction_note: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoiKind {
    /// A decision point.
    Landmark,
    /// Confirms the walker is on the right path; no decision needed.
    Reassurance,
    /// Captured during an exploratory walk, not yet classified.
    Candidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoiStatus {
    Pending,
    Confirmed,
    Rejected,
}

/// Directive shown at a POI. Serialized inline into the POI object as
/// `instruction` plus optional `symbol` and `audio`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    #[serde(rename = "instruction", default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbol: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<AssetId>,
}

impl Instruction {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }

    pub fn with_symbol(mut self, symbol: impl Into<String>) -> Self {
        self.symbol = Some(symbol.into());
        self
    }

    pub fn is_blank(&self) -> bool {
        self.text.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: PoiId,
    #[serde(flatten)]
    pub coordinate: GeoPoint,
    #[serde(rename = "ts_ms")]
    pub captured_ts_ms: i64,
    pub kind: PoiKind,
    pub status: PoiStatus,
    pub radius_m: f64,
    /// First entry is the primary photo.
    pub photos: Vec<AssetId>,
    #[serde(flatten)]
    pub instruction: Instruction,
    #[serde(default)]
    pub notes: String,
}

impl Poi {
    pub fn new(id: impl Into<PoiId>, coordinate: GeoPoint, captured_ts_ms: i64, kind: PoiKind) -> Self {
        Self {
            id: id.into(),
            coordinate,
            captured_ts_ms,
            kind,
            status: PoiStatus::Pending,
            radius_m: DEFAULT_GEOFENCE_RADIUS_M,
            photos: Vec::new(),
            instruction: Instruction::default(),
            notes: String::new(),
        }
    }

    pub fn with_photos<I, A>(mut self, photos: I) -> Self
    where
        I: IntoIterator<Item = A>,
        A: Into<AssetId>,
    {
        self.photos = photos.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_instruction(mut self, instruction: Instruction) -> Self {
        self.instruction = instruction;
        self
    }

    pub fn with_status(mut self, status: PoiStatus) -> Self {
        self.status = status;
        self
    }

    pub fn primary_photo(&self) -> Option<&AssetId> {
        self.photos.first()
    }

    pub fn is_decision_point(&self) -> bool {
        self.kind == PoiKind::Landmark && self.status == PoiStatus::Confirmed
    }
}

/// Degree of wayfinding support, ordered from most to least assistance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    Actionable,
    Quiz,
    Reward,
    Mute,
}

impl SupportMode {
    pub const LADDER: [SupportMode; 4] = [
        SupportMode::Actionable,
        SupportMode::Quiz,
        SupportMode::Reward,
        SupportMode::Mute,
    ];

    /// One rung less support.
    pub fn next(self) -> Option<SupportMode> {
        Self::LADDER.get(self.rung() + 1).copied()
    }

    /// One rung more support.
    pub fn prev(self) -> Option<SupportMode> {
        self.rung().checked_sub(1).map(|i| Self::LADDER[i])
    }

    pub fn rung(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SupportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SupportMode::Actionable => "actionable",
            SupportMode::Quiz => "quiz",
            SupportMode::Reward => "reward",
            SupportMode::Mute => "mute",
        };
        f.write_str(s)
    }
}

/// Half-open along-track interval `[start_m, end_m)` with its support mode.
/// A sub-path is identified by its index in the route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubPath {
    pub start_m: f64,
    pub end_m: f64,
    pub mode: SupportMode,
}

impl SubPath {
    pub fn new(start_m: f64, end_m: f64, mode: SupportMode) -> Self {
        Self { start_m, end_m, mode }
    }

    pub fn length_m(&self) -> f64 {
        self.end_m - self.start_m
    }
}

/// Splits the sub-path strictly containing `at_m` into two with the same mode.
pub fn split_subpaths(subpaths: &[SubPath], at_m: f64) -> Result<Vec<SubPath>, RouteError> {
    let idx = subpaths
        .iter()
        .position(|s| s.start_m + BOUNDARY_EPS_M < at_m && at_m < s.end_m - BOUNDARY_EPS_M)
        .ok_or_else(|| RouteError::SubPathEdit(format!("no sub-path strictly contains {at_m} m")))?;
    let mut out = subpaths.to_vec();
    let orig = out[idx];
    out[idx].end_m = at_m;
    out.insert(idx + 1, SubPath::new(at_m, orig.end_m, orig.mode));
    Ok(out)
}

/// Merges sub-path `index` with its successor; the merged one keeps the mode
/// of `index`.
pub fn merge_subpaths(subpaths: &[SubPath], index: usize) -> Result<Vec<SubPath>, RouteError> {
    if index + 1 >= subpaths.len() {
        return Err(RouteError::SubPathEdit(format!(
            "sub-path {index} has no successor to merge with"
        )));
    }
    let mut out = subpaths.to_vec();
    let next = out.remove(index + 1);
    out[index].end_m = next.end_m;
    Ok(out)
}

pub fn set_subpath_mode(
    subpaths: &[SubPath],
    index: usize,
    mode: SupportMode,
) -> Result<Vec<SubPath>, RouteError> {
    let mut out = subpaths.to_vec();
    out.get_mut(index)
        .ok_or_else(|| RouteError::SubPathEdit(format!("no sub-path {index}")))?
        .mode = mode;
    Ok(out)
}

/// Scales boundaries to a new route length; the last sub-path ends exactly at
/// `new_len`.
pub fn rescale_subpaths(subpaths: &[SubPath], old_len: f64, new_len: f64) -> Vec<SubPath> {
    if subpaths.is_empty() || old_len <= 0.0 {
        return subpaths.to_vec();
    }
    let k = new_len / old_len;
    let mut out: Vec<SubPath> = subpaths
        .iter()
        .map(|s| SubPath::new(s.start_m * k, s.end_m * k, s.mode))
        .collect();
    out[0].start_m = 0.0;
    for i in 1..out.len() {
        out[i].start_m = out[i - 1].end_m;
    }
    if let Some(last) = out.last_mut() {
        last.end_m = new_len;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteStatus {
    Draft,
    UnderNegotiation,
    Working,
}

/// A path augmented with landmarks and reassurances: the trainable artifact.
///
/// Fields are private: POI order and status transitions are maintained by the
/// curation and negotiation workflow, never set directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDefinition {
    id: RouteId,
    way_id: WayId,
    status: RouteStatus,
    version: u32,
    geometry: Polyline,
    pois: Vec<Poi>,
    subpaths: Vec<SubPath>,
}

impl RouteDefinition {
    /// A fresh draft at version 1 with POIs sorted along the geometry.
    pub fn draft(id: impl Into<RouteId>, way_id: impl Into<WayId>, geometry: Polyline, pois: Vec<Poi>) -> Self {
        let mut r = Self {
            id: id.into(),
            way_id: way_id.into(),
            status: RouteStatus::Draft,
            version: 1,
            geometry,
            pois,
            subpaths: Vec::new(),
        };
        r.sort_pois();
        r
    }

    pub fn id(&self) -> &RouteId {
        &self.id
    }

    pub fn way_id(&self) -> &WayId {
        &self.way_id
    }

    pub fn status(&self) -> RouteStatus {
        self.status
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn geometry(&self) -> &Polyline {
        &self.geometry
    }

    pub fn pois(&self) -> &[Poi] {
        &self.pois
    }

    pub fn subpaths(&self) -> &[SubPath] {
        &self.subpaths
    }

    pub fn length_m(&self) -> f64 {
        self.geometry.length()
    }

    pub fn poi(&self, id: &PoiId) -> Option<&Poi> {
        self.pois.iter().find(|p| &p.id == id)
    }

    pub fn poi_index(&self, id: &PoiId) -> Option<usize> {
        self.pois.iter().position(|p| &p.id == id)
    }

    /// Projection of a POI coordinate onto the full geometry.
    pub fn project(&self, p: GeoPoint) -> ProjectedPosition {
        project_onto_polyline(p, &self.geometry, self.geometry.full_window())
            .expect("full window is never empty")
    }

    /// Along-track position of every POI, in POI order.
    pub fn poi_positions(&self) -> Vec<ProjectedPosition> {
        self.pois.iter().map(|p| self.project(p.coordinate)).collect()
    }

    pub(crate) fn sort_pois(&mut self) {
        let mut keyed: Vec<(f64, Poi)> = self
            .pois
            .drain(..)
            .map(|p| (project_onto_polyline(p.coordinate, &self.geometry, self.geometry.full_window())
                .map(|pp| pp.along_track)
                .unwrap_or(f64::INFINITY), p))
            .collect();
        keyed.sort_by(|(a, pa), (b, pb)| {
            a.total_cmp(b)
                .then(pa.captured_ts_ms.cmp(&pb.captured_ts_ms))
                .then_with(|| pa.id.cmp(&pb.id))
        });
        self.pois = keyed.into_iter().map(|(_, p)| p).collect();
    }

    pub(crate) fn pois_mut(&mut self) -> &mut Vec<Poi> {
        &mut self.pois
    }

    pub(crate) fn set_geometry(&mut self, geometry: Polyline) {
        let old = self.geometry.length();
        self.geometry = geometry;
        self.subpaths = rescale_subpaths(&self.subpaths, old, self.geometry.length());
        self.sort_pois();
    }

    pub(crate) fn set_subpaths(&mut self, subpaths: Vec<SubPath>) {
        self.subpaths = subpaths;
    }

    pub(crate) fn set_status(&mut self, status: RouteStatus) {
        self.status = status;
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationCode {
    PhotoRequired,
    LandmarkInstructionRequired,
    InvalidCoordinate,
    RadiusOutOfRange,
    PoiOffPath,
    PoiOrder,
    DuplicatePoiId,
    SubpathEmpty,
    SubpathOverlap,
    SubpathGap,
    SubpathCoverage,
    WorkingNoSubpaths,
    WorkingPendingPoi,
    WorkingRejectedPoi,
    WorkingCandidatePoi,
    WorkingNoLandmark,
    InvalidVersion,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::PhotoRequired => "photo-required",
            ViolationCode::LandmarkInstructionRequired => "landmark-instruction-required",
            ViolationCode::InvalidCoordinate => "invalid-coordinate",
            ViolationCode::RadiusOutOfRange => "radius-out-of-range",
            ViolationCode::PoiOffPath => "poi-off-path",
            ViolationCode::PoiOrder => "poi-order",
            ViolationCode::DuplicatePoiId => "duplicate-poi-id",
            ViolationCode::SubpathEmpty => "subpath-empty",
            ViolationCode::SubpathOverlap => "subpath-overlap",
            ViolationCode::SubpathGap => "subpath-gap",
            ViolationCode::SubpathCoverage => "subpath-coverage",
            ViolationCode::WorkingNoSubpaths => "working-no-subpaths",
            ViolationCode::WorkingPendingPoi => "working-pending-poi",
            ViolationCode::WorkingRejectedPoi => "working-rejected-poi",
            ViolationCode::WorkingCandidatePoi => "working-candidate-poi",
            ViolationCode::WorkingNoLandmark => "working-no-landmark",
            ViolationCode::InvalidVersion => "invalid-version",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poi_id: Option<PoiId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subpath: Option<usize>,
    pub detail: String,
}

impl Violation {
    fn poi(code: ViolationCode, poi: &Poi, detail: impl Into<String>) -> Self {
        Self {
            code,
            poi_id: Some(poi.id.clone()),
            subpath: None,
            detail: detail.into(),
        }
    }

    fn subpath(code: ViolationCode, index: usize, detail: impl Into<String>) -> Self {
        Self {
            code,
            poi_id: None,
            subpath: Some(index),
            detail: detail.into(),
        }
    }

    fn route(code: ViolationCode, detail: impl Into<String>) -> Self {
        Self {
            code,
            poi_id: None,
            subpath: None,
            detail: detail.into(),
        }
    }

    /// Identity of the violation, ignoring the human-readable detail.
    pub fn key(&self) -> (ViolationCode, Option<PoiId>, Option<usize>) {
        (self.code, self.poi_id.clone(), self.subpath)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    pub fn codes(&self) -> BTreeSet<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    /// Violations present here but not in `baseline`.
    pub fn introduced_since(&self, baseline: &ValidationReport) -> Vec<&Violation> {
        let known: BTreeSet<_> = baseline.violations.iter().map(Violation::key).collect();
        self.violations
            .iter()
            .filter(|v| !known.contains(&v.key()))
            .collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| match (&v.poi_id, v.subpath) {
                (Some(p), _) => format!("{} (poi {p})", v.code),
                (None, Some(i)) => format!("{} (sub-path {i})", v.code),
                (None, None) => v.code.to_string(),
            })
            .collect();
        f.write_str(&parts.join(", "))
    }
}

/// Lists every violated route invariant. Never fails.
pub fn validate_route(def: &RouteDefinition) -> ValidationReport {
    use ViolationCode as C;
    let mut out = Vec::new();

    if def.version == 0 {
        out.push(Violation::route(C::InvalidVersion, "versions start at 1"));
    }

    let mut seen = BTreeSet::new();
    let mut prev_along = f64::NEG_INFINITY;
    for poi in &def.pois {
        if !seen.insert(&poi.id) {
            out.push(Violation::poi(C::DuplicatePoiId, poi, "poi id used twice"));
        }
        if poi.photos.is_empty() {
            out.push(Violation::poi(C::PhotoRequired, poi, "at least one photo is required"));
        }
        if poi.kind == PoiKind::Landmark && poi.instruction.is_blank() {
            out.push(Violation::poi(
                C::LandmarkInstructionRequired,
                poi,
                "landmarks need a non-empty instruction",
            ));
        }
        if !(MIN_GEOFENCE_RADIUS_M..=MAX_GEOFENCE_RADIUS_M).contains(&poi.radius_m) {
            out.push(Violation::poi(
                C::RadiusOutOfRange,
                poi,
                format!("radius {} m outside [10, 60]", poi.radius_m),
            ));
        }
        if !poi.coordinate.is_valid() {
            out.push(Violation::poi(C::InvalidCoordinate, poi, "coordinate out of range"));
            continue;
        }
        let pos = def.project(poi.coordinate);
        if pos.cross_track > MAX_POI_OFF_PATH_M {
            out.push(Violation::poi(
                C::PoiOffPath,
                poi,
                format!("{:.1} m from the path", pos.cross_track),
            ));
        }
        if pos.along_track + BOUNDARY_EPS_M < prev_along {
            out.push(Violation::poi(C::PoiOrder, poi, "not in along-track order"));
        }
        prev_along = prev_along.max(pos.along_track);
    }

    let length = def.length_m();
    for (i, s) in def.subpaths.iter().enumerate() {
        if !(s.start_m < s.end_m) {
            out.push(Violation::subpath(C::SubpathEmpty, i, "start must precede end"));
        }
        if i > 0 {
            let prev_end = def.subpaths[i - 1].end_m;
            if s.start_m < prev_end - BOUNDARY_EPS_M {
                out.push(Violation::subpath(
                    C::SubpathOverlap,
                    i,
                    format!("starts at {} m before previous end {} m", s.start_m, prev_end),
                ));
            } else if s.start_m > prev_end + BOUNDARY_EPS_M {
                out.push(Violation::subpath(
                    C::SubpathGap,
                    i,
                    format!("gap between {} m and {} m", prev_end, s.start_m),
                ));
            }
        }
    }
    if let (Some(first), Some(last)) = (def.subpaths.first(), def.subpaths.last()) {
        if first.start_m.abs() > BOUNDARY_EPS_M {
            out.push(Violation::subpath(C::SubpathCoverage, 0, "first sub-path must start at 0"));
        }
        if (last.end_m - length).abs() > 1e-3 {
            out.push(Violation::subpath(
                C::SubpathCoverage,
                def.subpaths.len() - 1,
                format!("last sub-path ends at {} m, route is {length} m", last.end_m),
            ));
        }
    }

    if def.status == RouteStatus::Working {
        if def.subpaths.is_empty() {
            out.push(Violation::route(C::WorkingNoSubpaths, "working routes need sub-paths"));
        }
        for poi in &def.pois {
            match poi.status {
                PoiStatus::Pending => {
                    out.push(Violation::poi(C::WorkingPendingPoi, poi, "undecided poi"));
                }
                PoiStatus::Rejected => {
                    out.push(Violation::poi(C::WorkingRejectedPoi, poi, "rejected poi"));
                }
                PoiStatus::Confirmed => {}
            }
            if poi.kind == PoiKind::Candidate {
                out.push(Violation::poi(C::WorkingCandidatePoi, poi, "unclassified candidate"));
            }
        }
        if !def.pois.iter().any(Poi::is_decision_point) {
            out.push(Violation::route(C::WorkingNoLandmark, "no decision points"));
        }
    }

    ValidationReport { violations: out }
}

/// Confirmed landmarks in along-track order.
pub fn decision_points(def: &RouteDefinition) -> Result<Vec<&Poi>, RouteError> {
    let report = validate_route(def);
    if !report.is_valid() {
        return Err(RouteError::Invalid(report));
    }
    Ok(def.pois.iter().filter(|p| p.is_decision_point()).collect())
}

/// The sub-path whose half-open interval contains `along_m`; the last one is
/// closed at the route end.
pub fn subpath_at(def: &RouteDefinition, along_m: f64) -> Result<(usize, &SubPath), RouteError> {
    let length = def.length_m();
    if !(along_m >= 0.0 && along_m <= length + BOUNDARY_EPS_M) {
        return Err(RouteError::OutOfRange {
            along_m,
            length_m: length,
        });
    }
    subpath_index(&def.subpaths, along_m)
        .map(|i| (i, &def.subpaths[i]))
        .ok_or(RouteError::NoSubPaths)
}

/// Index lookup shared with the indicator breakdown.
pub fn subpath_index(subpaths: &[SubPath], along_m: f64) -> Option<usize> {
    let last = subpaths.len().checked_sub(1)?;
    Some(
        subpaths
            .iter()
            .position(|s| s.start_m <= along_m && along_m < s.end_m)
            .unwrap_or(if along_m < subpaths[0].start_m { 0 } else { last }),
    )
}
