//! Trainer-side curation of a route definition and the negotiation
//! slideshow that involves the trainee in confirming it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::erw::{ErwError, ErwSession};
use crate::geo::{
    project_onto_polyline, GeoError, GeoPoint, Polyline, ProjectedPosition, AlongWindow,
};
use crate::ids::{AssetId, NegotiationId, PoiId, RouteId};
use crate::payload::{InstructionPayload, Modality};
use crate::route::{
    merge_subpaths, set_subpath_mode, split_subpaths, validate_route, Instruction, Poi, PoiKind,
    PoiStatus, RouteDefinition, RouteError, RouteStatus, SubPath, SupportMode, ValidationReport,
};

/// Half-width of the window used to follow a walk along its own path.
const PLAYBACK_WINDOW_M: f64 = 100.0;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("route is {actual:?}; {operation} is not allowed")]
    Status {
        operation: &'static str,
        actual: RouteStatus,
    },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("edit rejected: {0}")]
    EditRejected(ValidationReport),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("incomplete negotiation: {} undecided poi(s): {}", .0.len(), join_ids(.0))]
    IncompleteNegotiation(Vec<PoiId>),
    #[error("no decision points: at least one confirmed landmark is required")]
    NoDecisionPoints,
    #[error("timestamp {ts_ms} outside the walk [{start_ms}, {end_ms}]")]
    OutOfRange { ts_ms: i64, start_ms: i64, end_ms: i64 },
    #[error("negotiation {0} is already finalized")]
    Finalized(NegotiationId),
    #[error("transcript line {line}: {reason}")]
    Transcript { line: usize, reason: String },
    #[error(transparent)]
    Erw(#[from] ErwError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Route(#[from] RouteError),
}

fn join_ids(ids: &[PoiId]) -> String {
    ids.iter().map(PoiId::as_str).collect::<Vec<_>>().join(", ")
}

/// A new draft whose geometry is the reconstructed walk and whose POIs are
/// the walk's candidates.
pub fn draft_from_erw(erw: &ErwSession, route_id: impl Into<RouteId>) -> Result<RouteDefinition, DesignError> {
    let path = erw.reconstructed_path()?;
    Ok(RouteDefinition::draft(
        route_id,
        erw.way_id().clone(),
        path,
        erw.candidate_pois().to_vec(),
    ))
}

// ---------------------------------------------------------------------------
// Playback

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaybackSample {
    pub ts_ms: i64,
    pub fix_index: usize,
    pub position: ProjectedPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiMarker {
    pub poi_id: PoiId,
    pub ts_ms: i64,
    pub along_track: f64,
    /// Set when GPS noise placed this marker behind one captured earlier.
    pub inverted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaybackPosition {
    pub ts_ms: i64,
    pub along_track: f64,
    pub cross_track: f64,
    pub point: GeoPoint,
    pub nearest_fix: usize,
}

/// Time-to-position lookup over a finished walk. Fix timestamps are the
/// master clock; video and map follow them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaybackIndex {
    path: Polyline,
    samples: Vec<PlaybackSample>,
    markers: Vec<PoiMarker>,
}

pub fn build_playback_index(erw: &ErwSession) -> Result<PlaybackIndex, DesignError> {
    let path = erw.reconstructed_path()?;
    let mut samples = Vec::with_capacity(erw.fixes().len());
    let mut prev: Option<(f64, GeoPoint)> = None;
    for (i, fix) in erw.fixes().iter().enumerate() {
        let window = match prev {
            None => path.full_window(),
            Some((along, at)) => {
                let step = crate::geo::haversine_distance(at, fix.point);
                AlongWindow::new(along - PLAYBACK_WINDOW_M, along + PLAYBACK_WINDOW_M.max(2.0 * step + 50.0))
            }
        };
        let position = project_onto_polyline(fix.point, &path, window)?;
        prev = Some((position.along_track, fix.point));
        samples.push(PlaybackSample {
            ts_ms: fix.ts_ms,
            fix_index: i,
            position,
        });
    }

    let mut index = PlaybackIndex {
        path,
        samples,
        markers: Vec::new(),
    };
    let mut pois: Vec<&Poi> = erw.candidate_pois().iter().collect();
    pois.sort_by_key(|p| p.captured_ts_ms);
    let mut furthest = f64::NEG_INFINITY;
    for poi in pois {
        let ts = poi.captured_ts_ms.clamp(index.start_ms(), index.end_ms());
        let near = index.position_at(ts)?.along_track;
        let along = project_onto_polyline(
            poi.coordinate,
            &index.path,
            AlongWindow::around(near, PLAYBACK_WINDOW_M),
        )?
        .along_track;
        index.markers.push(PoiMarker {
            poi_id: poi.id.clone(),
            ts_ms: poi.captured_ts_ms,
            along_track: along,
            inverted: along < furthest,
        });
        furthest = furthest.max(along);
    }
    Ok(index)
}

impl PlaybackIndex {
    pub fn path(&self) -> &Polyline {
        &self.path
    }

    pub fn samples(&self) -> &[PlaybackSample] {
        &self.samples
    }

    pub fn markers(&self) -> &[PoiMarker] {
        &self.markers
    }

    pub fn start_ms(&self) -> i64 {
        self.samples[0].ts_ms
    }

    pub fn end_ms(&self) -> i64 {
        self.samples[self.samples.len() - 1].ts_ms
    }

    /// Position at `ts_ms`, linearly interpolated between the bracketing fixes.
    pub fn position_at(&self, ts_ms: i64) -> Result<PlaybackPosition, DesignError> {
        let (start_ms, end_ms) = (self.start_ms(), self.end_ms());
        if ts_ms < start_ms || ts_ms > end_ms {
            return Err(DesignError::OutOfRange { ts_ms, start_ms, end_ms });
        }
        let k = self.samples.partition_point(|s| s.ts_ms <= ts_ms) - 1;
        let a = &self.samples[k];
        let (along, cross, nearest) = match self.samples.get(k + 1) {
            Some(b) if a.ts_ms != ts_ms => {
                let f = (ts_ms - a.ts_ms) as f64 / (b.ts_ms - a.ts_ms) as f64;
                let lerp = |x: f64, y: f64| x + f * (y - x);
                let nearest = if f <= 0.5 { a.fix_index } else { b.fix_index };
                (
                    lerp(a.position.along_track, b.position.along_track),
                    lerp(a.position.cross_track, b.position.cross_track),
                    nearest,
                )
            }
            _ => (a.position.along_track, a.position.cross_track, a.fix_index),
        };
        Ok(PlaybackPosition {
            ts_ms,
            along_track: along,
            cross_track: cross,
            point: self.path.point_at(along),
            nearest_fix: nearest,
        })
    }

    pub fn marker(&self, poi_id: &PoiId) -> Option<&PoiMarker> {
        self.markers.iter().find(|m| &m.poi_id == poi_id)
    }

    /// Seeks playback to the moment a POI was captured.
    pub fn jump_to(&self, poi_id: &PoiId) -> Result<PlaybackPosition, DesignError> {
        let m = self
            .marker(poi_id)
            .ok_or_else(|| DesignError::NotFound(format!("poi {poi_id}")))?;
        self.position_at(m.ts_ms.clamp(self.start_ms(), self.end_ms()))
    }
}

// ---------------------------------------------------------------------------
// Curation edits

/// Optional field replacements for [`RouteEdit::EditPoi`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoiPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinate: Option<GeoPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photos: Option<Vec<AssetId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RouteEdit {
    AddPoi {
        poi: Poi,
    },
    RemovePoi {
        poi_id: PoiId,
    },
    EditPoi {
        poi_id: PoiId,
        patch: PoiPatch,
    },
    EditInstruction {
        poi_id: PoiId,
        instruction: Instruction,
    },
    MovePathVertex {
        index: usize,
        to: GeoPoint,
    },
    /// Classifies a candidate. A landmark needs an instruction, which may be
    /// supplied here or set beforehand.
    PromoteCandidate {
        poi_id: PoiId,
        kind: PoiKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        instruction: Option<Instruction>,
    },
    SplitSubPath {
        at_m: f64,
    },
    MergeSubPaths {
        index: usize,
    },
    SetSubPathMode {
        index: usize,
        mode: SupportMode,
    },
}

impl RouteEdit {
    /// Sub-path edits only change support configuration and are the one kind
    /// of change allowed on a working route.
    pub fn is_subpath_edit(&self) -> bool {
        matches!(
            self,
            RouteEdit::SplitSubPath { .. } | RouteEdit::MergeSubPaths { .. } | RouteEdit::SetSubPathMode { .. }
        )
    }

    /// The POI whose content this edit changes, if any.
    pub fn touched_poi(&self) -> Option<&PoiId> {
        match self {
            RouteEdit::AddPoi { poi } => Some(&poi.id),
            RouteEdit::RemovePoi { poi_id }
            | RouteEdit::EditPoi { poi_id, .. }
            | RouteEdit::EditInstruction { poi_id, .. }
            | RouteEdit::PromoteCandidate { poi_id, .. } => Some(poi_id),
            _ => None,
        }
    }
}

fn poi_mut<'a>(route: &'a mut RouteDefinition, id: &PoiId) -> Result<&'a mut Poi, DesignError> {
    route
        .pois_mut()
        .iter_mut()
        .find(|p| &p.id == id)
        .ok_or_else(|| DesignError::NotFound(format!("poi {id}")))
}

/// Applies one curation edit and returns the next version. The input is never
/// modified; an edit that introduces a new invariant violation is rejected.
pub fn apply_edit(route: &RouteDefinition, edit: &RouteEdit) -> Result<RouteDefinition, DesignError> {
    if route.status() == RouteStatus::Working && !edit.is_subpath_edit() {
        return Err(DesignError::Status {
            operation: "editing POIs or geometry",
            actual: route.status(),
        });
    }
    let baseline = validate_route(route);
    let mut next = route.clone();
    match edit {
        RouteEdit::AddPoi { poi } => {
            if route.poi(&poi.id).is_some() {
                return Err(DesignError::Precondition(format!("poi {} already exists", poi.id)));
            }
            next.pois_mut().push(poi.clone().with_status(PoiStatus::Pending));
        }
        RouteEdit::RemovePoi { poi_id } => {
            let idx = route
                .poi_index(poi_id)
                .ok_or_else(|| DesignError::NotFound(format!("poi {poi_id}")))?;
            next.pois_mut().remove(idx);
        }
        RouteEdit::EditPoi { poi_id, patch } => {
            let poi = poi_mut(&mut next, poi_id)?;
            if let Some(c) = patch.coordinate {
                poi.coordinate = c;
            }
            if let Some(r) = patch.radius_m {
                poi.radius_m = r;
            }
            if let Some(photos) = &patch.photos {
                poi.photos = photos.clone();
            }
            if let Some(n) = &patch.notes {
                poi.notes = n.clone();
            }
        }
        RouteEdit::EditInstruction { poi_id, instruction } => {
            poi_mut(&mut next, poi_id)?.instruction = instruction.clone();
        }
        RouteEdit::MovePathVertex { index, to } => {
            let count = route.geometry().vertices().len();
            if *index >= count {
                return Err(DesignError::NotFound(format!("vertex {index} of {count}")));
            }
            let geometry = route.geometry().with_vertex(*index, *to)?;
            next.set_geometry(geometry);
        }
        RouteEdit::PromoteCandidate { poi_id, kind, instruction } => {
            let poi = poi_mut(&mut next, poi_id)?;
            if poi.kind != PoiKind::Candidate {
                return Err(DesignError::Precondition(format!("poi {poi_id} is not a candidate")));
            }
            if *kind == PoiKind::Candidate {
                return Err(DesignError::Precondition("promotion target must be landmark or reassurance".into()));
            }
            poi.kind = *kind;
            if let Some(i) = instruction {
                poi.instruction = i.clone();
            }
        }
        RouteEdit::SplitSubPath { at_m } => {
            let sp = split_subpaths(route.subpaths(), *at_m)?;
            next.set_subpaths(sp);
        }
        RouteEdit::MergeSubPaths { index } => {
            let sp = merge_subpaths(route.subpaths(), *index)?;
            next.set_subpaths(sp);
        }
        RouteEdit::SetSubPathMode { index, mode } => {
            let sp = set_subpath_mode(route.subpaths(), *index, *mode)?;
            next.set_subpaths(sp);
        }
    }
    next.sort_pois();
    next.bump_version();

    let report = validate_route(&next);
    let introduced: Vec<_> = report.introduced_since(&baseline).into_iter().cloned().collect();
    if !introduced.is_empty() {
        return Err(DesignError::EditRejected(ValidationReport { violations: introduced }));
    }
    Ok(next)
}

/// Draft copy of a working route for another negotiation round.
pub fn reopen_route(route: &RouteDefinition) -> Result<RouteDefinition, DesignError> {
    if route.status() != RouteStatus::Working {
        return Err(DesignError::Status {
            operation: "reopening",
            actual: route.status(),
        });
    }
    let mut draft = route.clone();
    draft.set_status(RouteStatus::Draft);
    draft.bump_version();
    Ok(draft)
}

// ---------------------------------------------------------------------------
// Preview

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreviewCard {
    pub payload: InstructionPayload,
    pub status: PoiStatus,
    /// The POI is not confirmed yet, so training would not show it.
    pub preview_only: bool,
}

pub fn preview_poi(
    route: &RouteDefinition,
    poi_id: &PoiId,
    modalities: &BTreeSet<Modality>,
) -> Result<PreviewCard, DesignError> {
    let poi = route
        .poi(poi_id)
        .ok_or_else(|| DesignError::NotFound(format!("poi {poi_id}")))?;
    Ok(PreviewCard {
        payload: InstructionPayload::for_poi(poi, modalities),
        status: poi.status,
        preview_only: poi.status != PoiStatus::Confirmed,
    })
}

// ---------------------------------------------------------------------------
// Negotiation

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", content = "detail", rename_all = "snake_case")]
pub enum NegotiationAction {
    Next,
    Prev,
    Confirm,
    Reject,
    SelectPhoto(AssetId),
    ApproveInstruction,
    FlagPhoto(AssetId),
    Annotate(String),
}

impl NegotiationAction {
    pub fn name(&self) -> &'static str {
        match self {
            NegotiationAction::Next => "next",
            NegotiationAction::Prev => "prev",
            NegotiationAction::Confirm => "confirm",
            NegotiationAction::Reject => "reject",
            NegotiationAction::SelectPhoto(_) => "select_photo",
            NegotiationAction::ApproveInstruction => "approve_instruction",
            NegotiationAction::FlagPhoto(_) => "flag_photo",
            NegotiationAction::Annotate(_) => "annotate",
        }
    }

    fn detail(&self) -> Option<String> {
        match self {
            NegotiationAction::SelectPhoto(a) | NegotiationAction::FlagPhoto(a) => Some(a.0.clone()),
            NegotiationAction::Annotate(t) => Some(t.clone()),
            _ => None,
        }
    }

    fn parse(action: &str, detail: Option<&str>) -> Option<Self> {
        let need = || detail.map(str::to_owned);
        Some(match action {
            "next" => NegotiationAction::Next,
            "prev" => NegotiationAction::Prev,
            "confirm" => NegotiationAction::Confirm,
            "reject" => NegotiationAction::Reject,
            "approve_instruction" => NegotiationAction::ApproveInstruction,
            "select_photo" => NegotiationAction::SelectPhoto(AssetId(need()?)),
            "flag_photo" => NegotiationAction::FlagPhoto(AssetId(need()?)),
            "annotate" => NegotiationAction::Annotate(need()?),
            _ => return None,
        })
    }
}

/// One line of the negotiation transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub ts_ms: i64,
    pub neg_id: NegotiationId,
    pub poi_id: Option<PoiId>,
    pub action: String,
    pub detail: Option<String>,
}

/// Per-POI review state next to the decided status stored on the POI.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoiReview {
    pub primary_selected: Option<AssetId>,
    pub instruction_approved: bool,
    pub flagged_photos: BTreeSet<AssetId>,
    pub annotations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationSession {
    id: NegotiationId,
    route: RouteDefinition,
    cursor: usize,
    reviews: BTreeMap<PoiId, PoiReview>,
    transcript: Vec<TranscriptLine>,
    finalized: bool,
}

pub fn start_negotiation(
    id: impl Into<NegotiationId>,
    route: &RouteDefinition,
) -> Result<NegotiationSession, DesignError> {
    if route.status() == RouteStatus::Working {
        return Err(DesignError::Status {
            operation: "starting a negotiation",
            actual: route.status(),
        });
    }
    if route.pois().is_empty() {
        return Err(DesignError::Precondition("route has no POIs to negotiate".into()));
    }
    let report = validate_route(route);
    if !report.is_valid() {
        return Err(DesignError::EditRejected(report));
    }
    let mut route = route.clone();
    if route.status() == RouteStatus::Draft {
        route.set_status(RouteStatus::UnderNegotiation);
        route.bump_version();
    }
    let reviews = route
        .pois()
        .iter()
        .map(|p| (p.id.clone(), PoiReview::default()))
        .collect();
    Ok(NegotiationSession {
        id: id.into(),
        route,
        cursor: 0,
        reviews,
        transcript: Vec::new(),
        finalized: false,
    })
}

impl NegotiationSession {
    pub fn id(&self) -> &NegotiationId {
        &self.id
    }

    pub fn route(&self) -> &RouteDefinition {
        &self.route
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn current_poi(&self) -> &Poi {
        &self.route.pois()[self.cursor]
    }

    pub fn review(&self, poi_id: &PoiId) -> Option<&PoiReview> {
        self.reviews.get(poi_id)
    }

    pub fn transcript(&self) -> &[TranscriptLine] {
        &self.transcript
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn undecided(&self) -> Vec<PoiId> {
        self.route
            .pois()
            .iter()
            .filter(|p| p.status == PoiStatus::Pending)
            .map(|p| p.id.clone())
            .collect()
    }

    pub fn transcript_ndjson(&self) -> String {
        self.transcript
            .iter()
            .map(|l| serde_json::to_string(l).expect("transcript line serializes") + "\n")
            .collect()
    }

    fn ensure_open(&self) -> Result<(), DesignError> {
        if self.finalized {
            Err(DesignError::Finalized(self.id.clone()))
        } else {
            Ok(())
        }
    }

    /// Moves the cursor onto a POI.
    pub fn seek(&mut self, poi_id: &PoiId) -> Result<(), DesignError> {
        self.cursor = self
            .route
            .poi_index(poi_id)
            .ok_or_else(|| DesignError::NotFound(format!("poi {poi_id}")))?;
        Ok(())
    }

    /// Applies one slideshow action to the POI under the cursor and records
    /// it in the transcript. A failed action changes nothing.
    pub fn step(&mut self, action: NegotiationAction, ts_ms: i64) -> Result<TranscriptLine, DesignError> {
        self.ensure_open()?;
        let poi = self.current_poi().clone();
        let review = self.reviews.get(&poi.id).cloned().unwrap_or_default();
        let last = self.route.pois().len() - 1;
        let mut new_review = review.clone();
        let mut new_poi = poi.clone();
        let mut cursor = self.cursor;

        match &action {
            NegotiationAction::Next => cursor = (cursor + 1).min(last),
            NegotiationAction::Prev => cursor = cursor.saturating_sub(1),
            NegotiationAction::Confirm => {
                if poi.kind == PoiKind::Candidate {
                    return Err(DesignError::Precondition(format!(
                        "poi {} must be classified before it can be confirmed",
                        poi.id
                    )));
                }
                if review.primary_selected.is_none() {
                    return Err(DesignError::Precondition(format!(
                        "poi {} has no selected primary photo",
                        poi.id
                    )));
                }
                if poi.kind == PoiKind::Landmark && !review.instruction_approved {
                    return Err(DesignError::Precondition(format!(
                        "landmark {} needs an approved instruction",
                        poi.id
                    )));
                }
                new_poi.status = PoiStatus::Confirmed;
            }
            NegotiationAction::Reject => new_poi.status = PoiStatus::Rejected,
            NegotiationAction::SelectPhoto(asset) => {
                let pos = poi
                    .photos
                    .iter()
                    .position(|p| p == asset)
                    .ok_or_else(|| DesignError::NotFound(format!("photo {asset} on poi {}", poi.id)))?;
                if review.flagged_photos.contains(asset) {
                    return Err(DesignError::Precondition(format!("photo {asset} is flagged")));
                }
                let chosen = new_poi.photos.remove(pos);
                new_poi.photos.insert(0, chosen);
                new_review.primary_selected = Some(asset.clone());
            }
            NegotiationAction::ApproveInstruction => {
                if poi.instruction.is_blank() {
                    return Err(DesignError::Precondition(format!("poi {} has no instruction", poi.id)));
                }
                new_review.instruction_approved = true;
            }
            NegotiationAction::FlagPhoto(asset) => {
                if !poi.photos.contains(asset) {
                    return Err(DesignError::NotFound(format!("photo {asset} on poi {}", poi.id)));
                }
                new_review.flagged_photos.insert(asset.clone());
                if review.primary_selected.as_ref() == Some(asset) {
                    new_review.primary_selected = None;
                    if new_poi.status == PoiStatus::Confirmed {
                        new_poi.status = PoiStatus::Pending;
                    }
                }
            }
            NegotiationAction::Annotate(text) => new_review.annotations.push(text.clone()),
        }

        if new_poi != poi {
            *poi_mut(&mut self.route, &poi.id)? = new_poi;
        }
        self.reviews.insert(poi.id.clone(), new_review);
        self.cursor = cursor;
        let line = TranscriptLine {
            ts_ms,
            neg_id: self.id.clone(),
            poi_id: Some(poi.id),
            action: action.name().to_owned(),
            detail: action.detail(),
        };
        self.transcript.push(line.clone());
        Ok(line)
    }

    /// Applies a curation edit mid-negotiation. The touched POI goes back to
    /// pending with its approval cleared.
    pub fn edit(&mut self, edit: &RouteEdit, ts_ms: i64) -> Result<TranscriptLine, DesignError> {
        self.ensure_open()?;
        let current = self.current_poi().id.clone();
        let mut next = apply_edit(&self.route, edit)?;
        if let Some(id) = edit.touched_poi() {
            if let Some(idx) = next.poi_index(id) {
                next.pois_mut()[idx].status = PoiStatus::Pending;
            }
            self.reviews.insert(id.clone(), PoiReview::default());
        }
        if next.pois().is_empty() {
            return Err(DesignError::Precondition("a negotiation needs at least one POI".into()));
        }
        self.reviews.retain(|id, _| next.poi(id).is_some());
        self.cursor = next
            .poi_index(&current)
            .unwrap_or_else(|| self.cursor.min(next.pois().len() - 1));
        self.route = next;
        let line = TranscriptLine {
            ts_ms,
            neg_id: self.id.clone(),
            poi_id: edit.touched_poi().cloned(),
            action: "edit".into(),
            detail: Some(serde_json::to_string(edit).expect("edit serializes")),
        };
        self.transcript.push(line.clone());
        Ok(line)
    }

    /// Derives the first working route. Rejected POIs and flagged photos are
    /// dropped and a single actionable sub-path is installed if none exist.
    pub fn finalize(&mut self) -> Result<RouteDefinition, DesignError> {
        self.ensure_open()?;
        let undecided = self.undecided();
        if !undecided.is_empty() {
            return Err(DesignError::IncompleteNegotiation(undecided));
        }
        if !self.route.pois().iter().any(Poi::is_decision_point) {
            return Err(DesignError::NoDecisionPoints);
        }
        let mut route = self.route.clone();
        let reviews = &self.reviews;
        route.pois_mut().retain(|p| p.status == PoiStatus::Confirmed);
        for poi in route.pois_mut() {
            if let Some(r) = reviews.get(&poi.id) {
                poi.photos.retain(|a| !r.flagged_photos.contains(a));
            }
        }
        if route.subpaths().is_empty() {
            let len = route.length_m();
            route.set_subpaths(vec![SubPath::new(0.0, len, SupportMode::Actionable)]);
        }
        route.set_status(RouteStatus::Working);
        route.bump_version();
        let report = validate_route(&route);
        if !report.is_valid() {
            return Err(DesignError::EditRejected(report));
        }
        self.finalized = true;
        Ok(route)
    }
}

/// Rebuilds a negotiation from its transcript on top of the route it started
/// from. Each line first moves the cursor to its POI.
pub fn replay_transcript(route: &RouteDefinition, ndjson: &str) -> Result<NegotiationSession, DesignError> {
    let mut session: Option<NegotiationSession> = None;
    for (n, raw) in ndjson.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| DesignError::Transcript { line: n + 1, reason };
        let line: TranscriptLine = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
        let neg = match &mut session {
            Some(s) => s,
            None => session.insert(start_negotiation(line.neg_id.clone(), route)?),
        };
        if line.neg_id != neg.id {
            return Err(bad(format!("belongs to negotiation {}", line.neg_id)));
        }
        if line.action == "edit" {
            let edit: RouteEdit = serde_json::from_str(line.detail.as_deref().unwrap_or(""))
                .map_err(|e| bad(format!("edit detail: {e}")))?;
            neg.edit(&edit, line.ts_ms)?;
            continue;
        }
        if let Some(id) = &line.poi_id {
            neg.seek(id)?;
        }
        let action = NegotiationAction::parse(&line.action, line.detail.as_deref())
            .ok_or_else(|| bad(format!("unknown action `{}`", line.action)))?;
        neg.step(action, line.ts_ms)?;
    }
    session.ok_or_else(|| DesignError::Transcript {
        line: 0,
        reason: "empty transcript".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::erw::CaptureRole;
    use crate::geo::{GpsFix, EARTH_RADIUS_M};

    const M_PER_DEG: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint { lat, lon }
    }

    fn line() -> Polyline {
        Polyline::new(vec![pt(52.0, 8.0), pt(52.002, 8.0), pt(52.002, 8.003)]).unwrap()
    }

    fn candidate(id: &str, p: GeoPoint, ts: i64) -> Poi {
        Poi::new(id, p, ts, PoiKind::Candidate).with_photos([format!("{id}-a"), format!("{id}-b"), format!("{id}-c")])
    }

    fn draft() -> RouteDefinition {
        RouteDefinition::draft(
            "r",
            "w",
            line(),
            vec![
                candidate("c1", pt(52.001, 8.0), 10),
                candidate("c2", pt(52.002, 8.0), 20),
                candidate("c3", pt(52.002, 8.0015), 30),
            ],
        )
    }

    fn promoted() -> RouteDefinition {
        let r = apply_edit(
            &draft(),
            &RouteEdit::PromoteCandidate {
                poi_id: "c2".into(),
                kind: PoiKind::Landmark,
                instruction: Some(Instruction::text("turn right at the church")),
            },
        )
        .unwrap();
        let r = apply_edit(
            &r,
            &RouteEdit::PromoteCandidate {
                poi_id: "c1".into(),
                kind: PoiKind::Reassurance,
                instruction: None,
            },
        )
        .unwrap();
        apply_edit(
            &r,
            &RouteEdit::PromoteCandidate {
                poi_id: "c3".into(),
                kind: PoiKind::Reassurance,
                instruction: None,
            },
        )
        .unwrap()
    }

    fn confirm_all(neg: &mut NegotiationSession) {
        for i in 0..neg.route().pois().len() {
            let poi = neg.current_poi().clone();
            neg.step(NegotiationAction::SelectPhoto(poi.photos[0].clone()), i as i64).unwrap();
            if poi.kind == PoiKind::Landmark {
                neg.step(NegotiationAction::ApproveInstruction, i as i64).unwrap();
            }
            neg.step(NegotiationAction::Confirm, i as i64).unwrap();
            neg.step(NegotiationAction::Next, i as i64).unwrap();
        }
    }

    #[test]
    fn promote_keeps_pending() {
        let r = promoted();
        let poi = r.poi(&"c2".into()).unwrap();
        assert_eq!(poi.kind, PoiKind::Landmark);
        assert_eq!(poi.status, PoiStatus::Pending);
        assert_eq!(r.version(), 4);
    }

    #[test]
    fn promote_to_landmark_without_instruction_is_rejected() {
        let d = draft();
        let before = serde_json::to_vec(&d).unwrap();
        let err = apply_edit(
            &d,
            &RouteEdit::PromoteCandidate {
                poi_id: "c1".into(),
                kind: PoiKind::Landmark,
                instruction: None,
            },
        );
        assert!(matches!(err, Err(DesignError::EditRejected(_))));
        assert_eq!(serde_json::to_vec(&d).unwrap(), before);
    }

    #[test]
    fn remove_missing_poi_is_not_found() {
        let d = draft();
        assert!(matches!(
            apply_edit(&d, &RouteEdit::RemovePoi { poi_id: "nope".into() }),
            Err(DesignError::NotFound(_))
        ));
        assert_eq!(d.version(), 1);
    }

    #[test]
    fn removing_last_photo_is_rejected() {
        let r = apply_edit(
            &draft(),
            &RouteEdit::EditPoi {
                poi_id: "c1".into(),
                patch: PoiPatch {
                    photos: Some(vec![]),
                    ..PoiPatch::default()
                },
            },
        );
        match r {
            Err(DesignError::EditRejected(rep)) => assert_eq!(rep.violations[0].code.as_str(), "photo-required"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn moving_a_spike_vertex_recomputes_positions() {
        // the middle vertex has a 40 m GPS spike to the west
        let spiky = Polyline::new(vec![pt(52.0, 8.0), pt(52.001, 8.0 - 40.0 / (M_PER_DEG * 52f64.to_radians().cos())), pt(52.002, 8.0)]).unwrap();
        let poi = candidate("c", pt(52.0015, 8.0), 0);
        let r = RouteDefinition::draft("r", "w", spiky, vec![poi]);
        let before = r.poi_positions()[0];
        let fixed = apply_edit(&r, &RouteEdit::MovePathVertex { index: 1, to: pt(52.001, 8.0) }).unwrap();
        let after = fixed.poi_positions()[0];
        assert!(after.cross_track < 1e-3);
        assert!(after.along_track < before.along_track);
        assert!((after.along_track - 0.0015 * M_PER_DEG).abs() < 0.01);
    }

    #[test]
    fn working_routes_accept_only_subpath_edits() {
        let mut neg = start_negotiation("n", &promoted()).unwrap();
        confirm_all(&mut neg);
        let working = neg.finalize().unwrap();
        assert!(matches!(
            apply_edit(&working, &RouteEdit::RemovePoi { poi_id: "c1".into() }),
            Err(DesignError::Status { .. })
        ));
        let split = apply_edit(&working, &RouteEdit::SplitSubPath { at_m: 100.0 }).unwrap();
        assert_eq!(split.subpaths().len(), 2);
        assert_eq!(split.status(), RouteStatus::Working);
        assert_eq!(split.version(), working.version() + 1);
        let quiz = apply_edit(&split, &RouteEdit::SetSubPathMode { index: 1, mode: SupportMode::Quiz }).unwrap();
        assert_eq!(quiz.subpaths()[1].mode, SupportMode::Quiz);
    }

    #[test]
    fn select_photo_makes_it_primary() {
        let mut neg = start_negotiation("n", &promoted()).unwrap();
        neg.step(NegotiationAction::SelectPhoto("c1-c".into()), 1).unwrap();
        assert_eq!(neg.current_poi().primary_photo().unwrap().as_str(), "c1-c");
        assert_eq!(neg.current_poi().photos.len(), 3);
    }

    #[test]
    fn confirm_landmark_needs_approval() {
        let mut neg = start_negotiation("n", &promoted()).unwrap();
        neg.seek(&"c2".into()).unwrap();
        neg.step(NegotiationAction::SelectPhoto("c2-a".into()), 1).unwrap();
        let before = neg.clone();
        assert!(matches!(neg.step(NegotiationAction::Confirm, 2), Err(DesignError::Precondition(_))));
        assert_eq!(neg, before);
        neg.step(NegotiationAction::ApproveInstruction, 3).unwrap();
        neg.step(NegotiationAction::Confirm, 4).unwrap();
        assert_eq!(neg.current_poi().status, PoiStatus::Confirmed);
    }

    #[test]
    fn flag_photo_keeps_pending() {
        let mut neg = start_negotiation("n", &promoted()).unwrap();
        neg.step(NegotiationAction::FlagPhoto("c1-b".into()), 1).unwrap();
        assert_eq!(neg.current_poi().status, PoiStatus::Pending);
        assert!(neg.review(&"c1".into()).unwrap().flagged_photos.contains(&AssetId::new("c1-b")));
        assert!(neg.step(NegotiationAction::SelectPhoto("c1-b".into()), 2).is_err());
    }

    #[test]
    fn finalize_filters_rejected_and_installs_default_subpath() {
        let mut neg = start_negotiation("n", &promoted()).unwrap();
        confirm_all(&mut neg);
        neg.seek(&"c3".into()).unwrap();
        neg.step(NegotiationAction::Reject, 9).unwrap();
        let w = neg.finalize().unwrap();
        assert_eq!(w.status(), RouteStatus::Working);
        assert_eq!(w.pois().len(), 2);
        assert_eq!(w.subpaths(), &[SubPath::new(0.0, w.length_m(), SupportMode::Actionable)]);
        assert!(validate_route(&w).is_valid());
        assert!(matches!(neg.step(NegotiationAction::Next, 10), Err(DesignError::Finalized(_))));
    }

    #[test]
    fn finalize_errors() {
        let mut neg = start_negotiation("n", &promoted()).unwrap();
        assert!(matches!(neg.finalize(), Err(DesignError::IncompleteNegotiation(ids)) if ids.len() == 3));

        let mut neg = start_negotiation("n", &promoted()).unwrap();
        confirm_all(&mut neg);
        neg.seek(&"c2".into()).unwrap();
        neg.step(NegotiationAction::Reject, 9).unwrap();
        assert!(matches!(neg.finalize(), Err(DesignError::NoDecisionPoints)));
    }

    #[test]
    fn flagged_photos_are_dropped_on_finalize() {
        let mut neg = start_negotiation("n", &promoted()).unwrap();
        neg.step(NegotiationAction::FlagPhoto("c1-c".into()), 0).unwrap();
        confirm_all(&mut neg);
        let w = neg.finalize().unwrap();
        assert_eq!(w.poi(&"c1".into()).unwrap().photos.len(), 2);
    }

    #[test]
    fn transcript_replays_to_the_same_state() {
        let mut neg = start_negotiation("n1", &promoted()).unwrap();
        neg.step(NegotiationAction::Annotate("user prefers the red door".into()), 1).unwrap();
        neg.edit(
            &RouteEdit::EditInstruction {
                poi_id: "c2".into(),
                instruction: Instruction::text("turn right after the red door"),
            },
            2,
        )
        .unwrap();
        confirm_all(&mut neg);
        let text = neg.transcript_ndjson();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for k in ["ts_ms", "neg_id", "poi_id", "action", "detail"] {
            assert!(first.get(k).is_some(), "missing {k}");
        }
        let replayed = replay_transcript(&promoted(), &text).unwrap();
        assert_eq!(replayed, neg);
    }

    #[test]
    fn edit_resets_review() {
        let mut neg = start_negotiation("n", &promoted()).unwrap();
        confirm_all(&mut neg);
        neg.edit(
            &RouteEdit::EditInstruction {
                poi_id: "c2".into(),
                instruction: Instruction::text("go left"),
            },
            5,
        )
        .unwrap();
        let c2 = neg.route().poi(&"c2".into()).unwrap();
        assert_eq!(c2.status, PoiStatus::Pending);
        assert!(!neg.review(&"c2".into()).unwrap().instruction_approved);
    }

    #[test]
    fn reopen_creates_draft_version() {
        let mut neg = start_negotiation("n", &promoted()).unwrap();
        confirm_all(&mut neg);
        let w = neg.finalize().unwrap();
        let d = reopen_route(&w).unwrap();
        assert_eq!(d.status(), RouteStatus::Draft);
        assert_eq!(d.version(), w.version() + 1);
        assert!(reopen_route(&d).is_err());
    }

    #[test]
    fn preview_marks_pending() {
        let r = promoted();
        let modalities = BTreeSet::from([Modality::Text]);
        let card = preview_poi(&r, &"c2".into(), &modalities).unwrap();
        assert!(card.preview_only);
        assert_eq!(card.payload.text.as_deref(), Some("turn right at the church"));
        assert!(matches!(preview_poi(&r, &"zz".into(), &modalities), Err(DesignError::NotFound(_))));
    }

    fn walk() -> ErwSession {
        let mut s = ErwSession::start("e", "w", 0);
        for i in 0..=20 {
            s.append_fix(GpsFix::new(pt(52.0 + i as f64 * 1e-4, 8.0), i * 1000)).unwrap();
        }
        s.capture_poi(GpsFix::new(pt(52.0005, 8.0), 5000), vec!["a".into()], "", CaptureRole::Trainer)
            .unwrap();
        s.capture_poi(GpsFix::new(pt(52.0015, 8.0), 15000), vec!["b".into()], "", CaptureRole::Trainer)
            .unwrap();
        s.finish().unwrap();
        s
    }

    #[test]
    fn playback_exact_and_interpolated() {
        let idx = build_playback_index(&walk()).unwrap();
        let at = idx.position_at(3000).unwrap();
        assert_eq!(at.nearest_fix, 3);
        assert!((at.along_track - 3e-4 * M_PER_DEG).abs() < 0.01);
        let mid = idx.position_at(3500).unwrap();
        let hand = (idx.samples()[3].position.along_track + idx.samples()[4].position.along_track) / 2.0;
        assert!((mid.along_track - hand).abs() < 1e-9);
        assert!(matches!(idx.position_at(20_001), Err(DesignError::OutOfRange { .. })));
        assert!(idx.position_at(-1).is_err());
    }

    #[test]
    fn playback_markers() {
        let idx = build_playback_index(&walk()).unwrap();
        let m = idx.marker(&"e-poi-2".into()).unwrap();
        assert_eq!(m.ts_ms, 15000);
        assert!((m.along_track - 15e-4 * M_PER_DEG).abs() < 0.01);
        assert!(!m.inverted);
        let jump = idx.jump_to(&"e-poi-1".into()).unwrap();
        assert_eq!(jump.nearest_fix, 5);
    }

    #[test]
    fn draft_from_walk() {
        let r = draft_from_erw(&walk(), "r1").unwrap();
        assert_eq!(r.pois().len(), 2);
        assert_eq!(r.status(), RouteStatus::Draft);
        assert!(validate_route(&r).is_valid());
    }
}
