//! Exploratory route walk capture and trainee-to-trainer transfer.
//!
//! A walk records a GPS trace, candidate POIs with photos, and a video
//! reference. Raw walks only ever travel over the direct device link; the
//! first cloud-syncable artifact is the curated working route.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{
    read_trace_csv, simplify_trace, trace_to_csv_string, GeoError, GpsFix, Polyline,
    DEFAULT_SIMPLIFY_TOLERANCE_M,
};
use crate::ids::{AssetId, ErwId, PoiId, WayId};
use crate::media::{sha256_hex, MediaAsset, MediaKind, MediaLibrary};
use crate::privacy::{classify, DataClass, ItemKind};
use crate::route::{Poi, PoiKind};

pub const RAW_ERW_NOT_CLOUD_SYNCABLE: &str = "raw-erw-is-not-cloud-syncable";

const SESSION_FILE: &str = "erw.json";
const TRACE_FILE: &str = "trace.csv";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ErwError {
    #[error("session is {actual:?}, operation needs {expected:?}")]
    State { expected: ErwState, actual: ErwState },
    #[error("fix at {got} ms does not follow {previous} ms")]
    Ordering { previous: i64, got: i64 },
    #[error("capture at {ts_ms} ms precedes the session start {started_ts_ms} ms")]
    BeforeStart { ts_ms: i64, started_ts_ms: i64 },
    #[error("a POI capture needs at least one photo")]
    PhotoRequired,
    #[error("need at least 2 fixes to reconstruct a path, have {0}")]
    InsufficientData(usize),
    #[error("classification error: {0}")]
    Classification(&'static str),
    #[error("asset {0} is not present on this device")]
    MissingAsset(AssetId),
    #[error("asset id `{0}` cannot be used as a file name")]
    BadAssetId(AssetId),
    #[error("integrity error: item `{0}` does not match its manifest hash")]
    Integrity(String),
    #[error("package: {0}")]
    Package(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErwState {
    Recording,
    Finished,
}

/// Who operated the capture. Recorded, not interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureRole {
    #[default]
    Trainer,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureAttribution {
    pub poi_id: PoiId,
    pub role: CaptureRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErwSession {
    id: ErwId,
    way_id: WayId,
    state: ErwState,
    started_ts_ms: i64,
    ended_ts_ms: Option<i64>,
    fixes: Vec<GpsFix>,
    candidate_pois: Vec<Poi>,
    captures: Vec<CaptureAttribution>,
    video_ref: Option<AssetId>,
}

impl ErwSession {
    pub fn start(id: impl Into<ErwId>, way_id: impl Into<WayId>, started_ts_ms: i64) -> Self {
        Self {
            id: id.into(),
            way_id: way_id.into(),
            state: ErwState::Recording,
            started_ts_ms,
            ended_ts_ms: None,
            fixes: Vec::new(),
            candidate_pois: Vec::new(),
            captures: Vec::new(),
            video_ref: None,
        }
    }

    pub fn id(&self) -> &ErwId {
        &self.id
    }

    pub fn way_id(&self) -> &WayId {
        &self.way_id
    }

    pub fn state(&self) -> ErwState {
        self.state
    }

    pub fn started_ts_ms(&self) -> i64 {
        self.started_ts_ms
    }

    pub fn ended_ts_ms(&self) -> Option<i64> {
        self.ended_ts_ms
    }

    pub fn fixes(&self) -> &[GpsFix] {
        &self.fixes
    }

    pub fn candidate_pois(&self) -> &[Poi] {
        &self.candidate_pois
    }

    pub fn captures(&self) -> &[CaptureAttribution] {
        &self.captures
    }

    pub fn video_ref(&self) -> Option<&AssetId> {
        self.video_ref.as_ref()
    }

    fn require_recording(&self) -> Result<(), ErwError> {
        match self.state {
            ErwState::Recording => Ok(()),
            actual => Err(ErwError::State {
                expected: ErwState::Recording,
                actual,
            }),
        }
    }

    pub fn append_fix(&mut self, fix: GpsFix) -> Result<(), ErwError> {
        self.require_recording()?;
        if !fix.point.is_valid() {
            return Err(GeoError::InvalidCoordinate {
                lat: fix.point.lat,
                lon: fix.point.lon,
            }
            .into());
        }
        if fix.ts_ms < self.started_ts_ms {
            return Err(ErwError::BeforeStart {
                ts_ms: fix.ts_ms,
                started_ts_ms: self.started_ts_ms,
            });
        }
        if let Some(last) = self.fixes.last() {
            if fix.ts_ms <= last.ts_ms {
                return Err(ErwError::Ordering {
                    previous: last.ts_ms,
                    got: fix.ts_ms,
                });
            }
        }
        self.fixes.push(fix);
        Ok(())
    }

    /// Adds a pending candidate POI at the given fix. Duplicates are kept;
    /// merging them is a curation task.
    pub fn capture_poi(
        &mut self,
        at: GpsFix,
        photos: Vec<AssetId>,
        note: &str,
        role: CaptureRole,
    ) -> Result<PoiId, ErwError> {
        self.require_recording()?;
        if photos.is_empty() {
            return Err(ErwError::PhotoRequired);
        }
        if at.ts_ms < self.started_ts_ms {
            return Err(ErwError::BeforeStart {
                ts_ms: at.ts_ms,
                started_ts_ms: self.started_ts_ms,
            });
        }
        if !at.point.is_valid() {
            return Err(GeoError::InvalidCoordinate {
                lat: at.point.lat,
                lon: at.point.lon,
            }
            .into());
        }
        let id = PoiId::new(format!("{}-poi-{}", self.id, self.candidate_pois.len() + 1));
        let mut poi = Poi::new(id.clone(), at.point, at.ts_ms, PoiKind::Candidate).with_photos(photos);
        poi.notes = note.to_owned();
        self.candidate_pois.push(poi);
        self.captures.push(CaptureAttribution {
            poi_id: id.clone(),
            role,
        });
        Ok(id)
    }

    pub fn attach_video(&mut self, asset: AssetId) -> Result<(), ErwError> {
        self.require_recording()?;
        self.video_ref = Some(asset);
        Ok(())
    }

    /// Closes the session and reconstructs the walked path.
    pub fn finish(&mut self) -> Result<Polyline, ErwError> {
        self.require_recording()?;
        if self.fixes.len() < 2 {
            return Err(ErwError::InsufficientData(self.fixes.len()));
        }
        let path = simplify_trace(&self.fixes, DEFAULT_SIMPLIFY_TOLERANCE_M)?;
        let last_fix = self.fixes.last().map_or(self.started_ts_ms, |f| f.ts_ms);
        let last_poi = self
            .candidate_pois
            .iter()
            .map(|p| p.captured_ts_ms)
            .max()
            .unwrap_or(self.started_ts_ms);
        self.ended_ts_ms = Some(last_fix.max(last_poi));
        self.state = ErwState::Finished;
        Ok(path)
    }

    /// The reconstructed path of a finished session.
    pub fn reconstructed_path(&self) -> Result<Polyline, ErwError> {
        if self.state != ErwState::Finished {
            return Err(ErwError::State {
                expected: ErwState::Finished,
                actual: self.state,
            });
        }
        Ok(simplify_trace(&self.fixes, DEFAULT_SIMPLIFY_TOLERANCE_M)?)
    }

    /// Every asset the session references, with the kind it was captured as.
    pub fn referenced_assets(&self) -> Vec<(AssetId, MediaKind)> {
        let mut out: Vec<(AssetId, MediaKind)> = Vec::new();
        for poi in &self.candidate_pois {
            for photo in &poi.photos {
                if !out.iter().any(|(a, _)| a == photo) {
                    out.push((photo.clone(), MediaKind::Photo));
                }
            }
        }
        if let Some(v) = &self.video_ref {
            out.push((v.clone(), MediaKind::Video));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferDestination {
    /// The trainer's device over the direct peer link.
    TrainerDevice,
    Cloud,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageItem {
    pub id: String,
    pub class: DataClass,
    pub sha256: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageManifest {
    pub session_id: ErwId,
    pub destination: TransferDestination,
    pub items: Vec<PackageItem>,
}

/// Manifest plus payload bytes keyed by relative path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferPackage {
    pub manifest: PackageManifest,
    pub payloads: BTreeMap<String, Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct SessionMeta {
    id: ErwId,
    way_id: WayId,
    state: ErwState,
    started_ts_ms: i64,
    ended_ts_ms: Option<i64>,
    candidate_pois: Vec<Poi>,
    captures: Vec<CaptureAttribution>,
    video_ref: Option<AssetId>,
}

fn safe_asset_name(id: &AssetId) -> Result<(), ErwError> {
    let s = id.as_str();
    let ok = !s.is_empty()
        && !s.starts_with('.')
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_.".contains(&b));
    if ok {
        Ok(())
    } else {
        Err(ErwError::BadAssetId(id.clone()))
    }
}

/// Packages a finished walk for the trainer's device. Cloud is refused: raw
/// walks are never cloud-syncable.
pub fn build_transfer_package(
    session: &ErwSession,
    media: &MediaLibrary,
    destination: TransferDestination,
) -> Result<TransferPackage, ErwError> {
    if destination == TransferDestination::Cloud {
        return Err(ErwError::Classification(RAW_ERW_NOT_CLOUD_SYNCABLE));
    }
    if session.state != ErwState::Finished {
        return Err(ErwError::State {
            expected: ErwState::Finished,
            actual: session.state,
        });
    }

    let mut items = Vec::new();
    let mut payloads = BTreeMap::new();
    let mut add = |id: String, class: DataClass, path: String, bytes: Vec<u8>| {
        items.push(PackageItem {
            id,
            class,
            sha256: sha256_hex(&bytes),
            path: path.clone(),
        });
        payloads.insert(path, bytes);
    };

    let meta = SessionMeta {
        id: session.id.clone(),
        way_id: session.way_id.clone(),
        state: session.state,
        started_ts_ms: session.started_ts_ms,
        ended_ts_ms: session.ended_ts_ms,
        candidate_pois: session.candidate_pois.clone(),
        captures: session.captures.clone(),
        video_ref: session.video_ref.clone(),
    };
    let raw_class = classify(ItemKind::RawErwSession);
    add(
        format!("{}/session", session.id),
        raw_class,
        SESSION_FILE.into(),
        serde_json::to_vec_pretty(&meta).expect("session metadata serializes"),
    );
    add(
        format!("{}/trace", session.id),
        raw_class,
        TRACE_FILE.into(),
        trace_to_csv_string(&session.fixes).into_bytes(),
    );
    for (asset, kind) in session.referenced_assets() {
        safe_asset_name(&asset)?;
        let blob = media
            .get(&asset)
            .ok_or_else(|| ErwError::MissingAsset(asset.clone()))?;
        let class = match kind {
            MediaKind::Video => classify(ItemKind::VideoAsset),
            _ => classify(ItemKind::PoiPhoto { curated: false }),
        };
        add(asset.0.clone(), class, format!("media/{asset}"), blob.bytes.clone());
    }

    Ok(TransferPackage {
        manifest: PackageManifest {
            session_id: session.id.clone(),
            destination,
            items,
        },
        payloads,
    })
}

fn relative_path_ok(p: &str) -> bool {
    let path = Path::new(p);
    !p.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_)))
}

impl TransferPackage {
    /// Checks every payload against its manifest hash.
    pub fn verify(&self) -> Result<(), ErwError> {
        if self.manifest.items.len() != self.payloads.len() {
            return Err(ErwError::Package(format!(
                "manifest lists {} items, package holds {}",
                self.manifest.items.len(),
                self.payloads.len()
            )));
        }
        for item in &self.manifest.items {
            let bytes = self
                .payloads
                .get(&item.path)
                .ok_or_else(|| ErwError::Package(format!("missing payload {}", item.path)))?;
            if sha256_hex(bytes) != item.sha256 {
                return Err(ErwError::Integrity(item.id.clone()));
            }
        }
        Ok(())
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<(), ErwError> {
        fs::create_dir_all(dir)?;
        for (path, bytes) in &self.payloads {
            if !relative_path_ok(path) {
                return Err(ErwError::Package(format!("unsafe path {path}")));
            }
            let target = dir.join(path);
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(target, bytes)?;
        }
        let manifest = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    pub fn read_from_dir(dir: &Path) -> Result<Self, ErwError> {
        let raw = fs::read(dir.join(MANIFEST_FILE))?;
        let manifest: PackageManifest = serde_json::from_slice(&raw)
            .map_err(|e| ErwError::Package(format!("manifest.json: {e}")))?;
        let mut payloads = BTreeMap::new();
        for item in &manifest.items {
            if !relative_path_ok(&item.path) {
                return Err(ErwError::Package(format!("unsafe path {}", item.path)));
            }
            payloads.insert(item.path.clone(), fs::read(dir.join(&item.path))?);
        }
        Ok(Self { manifest, payloads })
    }
}

/// Receives a package on the trainer's device: verifies hashes and rebuilds
/// the walk with its media.
pub fn accept_package(pkg: &TransferPackage) -> Result<(ErwSession, MediaLibrary), ErwError> {
    if pkg.manifest.destination != TransferDestination::TrainerDevice {
        return Err(ErwError::Classification(RAW_ERW_NOT_CLOUD_SYNCABLE));
    }
    pkg.verify()?;
    let meta: SessionMeta = serde_json::from_slice(
        pkg.payloads
            .get(SESSION_FILE)
            .ok_or_else(|| ErwError::Package("missing erw.json".into()))?,
    )
    .map_err(|e| ErwError::Package(format!("erw.json: {e}")))?;
    let fixes = read_trace_csv(
        pkg.payloads
            .get(TRACE_FILE)
            .ok_or_else(|| ErwError::Package("missing trace.csv".into()))?
            .as_slice(),
    )?;
    let session = ErwSession {
        id: meta.id,
        way_id: meta.way_id,
        state: meta.state,
        started_ts_ms: meta.started_ts_ms,
        ended_ts_ms: meta.ended_ts_ms,
        fixes,
        candidate_pois: meta.candidate_pois,
        captures: meta.captures,
        video_ref: meta.video_ref,
    };
    let mut media = MediaLibrary::new();
    for (asset, kind) in session.referenced_assets() {
        let bytes = pkg
            .payloads
            .get(&format!("media/{asset}"))
            .ok_or_else(|| ErwError::MissingAsset(asset.clone()))?;
        media.insert(MediaAsset::new(asset, kind, bytes.clone()));
    }
    Ok((session, media))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;

    fn fix(ts: i64, lat: f64, lon: f64) -> GpsFix {
        GpsFix::new(GeoPoint { lat, lon }, ts)
    }

    fn recorded() -> (ErwSession, MediaLibrary) {
        let mut s = ErwSession::start("erw1", "w1", 0);
        for i in 0..20 {
            s.append_fix(fix(i * 1000, 52.0 + i as f64 * 1e-5, 8.0)).unwrap();
        }
        s.capture_poi(fix(5000, 52.00005, 8.0), vec!["ph1".into(), "ph2".into()], "bakery", CaptureRole::Trainer)
            .unwrap();
        s.attach_video("vid1".into()).unwrap();
        let mut media = MediaLibrary::new();
        media.insert(MediaAsset::new("ph1", MediaKind::Photo, b"photo-one".to_vec()));
        media.insert(MediaAsset::new("ph2", MediaKind::Photo, b"photo-two".to_vec()));
        media.insert(MediaAsset::new("vid1", MediaKind::Video, b"VIDEO-BYTES".to_vec()));
        (s, media)
    }

    #[test]
    fn first_fix_and_ordering() {
        let mut s = ErwSession::start("e", "w", 0);
        s.append_fix(fix(10, 1.0, 1.0)).unwrap();
        assert_eq!(s.fixes().len(), 1);
        assert!(matches!(
            s.append_fix(fix(10, 1.0, 1.0)),
            Err(ErwError::Ordering { previous: 10, got: 10 })
        ));
        assert_eq!(s.fixes().len(), 1);
    }

    #[test]
    fn capture_requires_photos() {
        let mut s = ErwSession::start("e", "w", 0);
        let id = s
            .capture_poi(fix(1, 1.0, 1.0), vec!["a".into(), "b".into(), "c".into()], "", CaptureRole::User)
            .unwrap();
        let poi = &s.candidate_pois()[0];
        assert_eq!(poi.id, id);
        assert_eq!(poi.photos.len(), 3);
        assert_eq!(poi.kind, PoiKind::Candidate);
        assert!(matches!(
            s.capture_poi(fix(2, 1.0, 1.0), vec![], "", CaptureRole::Trainer),
            Err(ErwError::PhotoRequired)
        ));
        let id2 = s
            .capture_poi(fix(3, 1.0, 1.0), vec!["d".into()], "", CaptureRole::Trainer)
            .unwrap();
        assert_ne!(id, id2);
        assert_eq!(s.captures()[0].role, CaptureRole::User);
    }

    #[test]
    fn finish_straight_and_l_shaped() {
        let mut s = ErwSession::start("e", "w", 0);
        for i in 0..100 {
            s.append_fix(fix(i, 52.0 + i as f64 * 1e-5, 8.0)).unwrap();
        }
        assert_eq!(s.finish().unwrap().vertices().len(), 2);
        assert_eq!(s.state(), ErwState::Finished);
        assert!(matches!(s.finish(), Err(ErwError::State { .. })));
        assert!(s.append_fix(fix(1000, 1.0, 1.0)).is_err());
        assert!(s.attach_video("v".into()).is_err());

        let mut l = ErwSession::start("l", "w", 0);
        for i in 0..50 {
            l.append_fix(fix(i, 52.0 + i as f64 * 2e-5, 8.0)).unwrap();
        }
        for i in 1..50 {
            l.append_fix(fix(50 + i, 52.0 + 49.0 * 2e-5, 8.0 + i as f64 * 3e-5)).unwrap();
        }
        assert_eq!(l.finish().unwrap().vertices().len(), 3);
    }

    #[test]
    fn finish_needs_two_fixes() {
        let mut s = ErwSession::start("e", "w", 0);
        s.append_fix(fix(1, 1.0, 1.0)).unwrap();
        assert!(matches!(s.finish(), Err(ErwError::InsufficientData(1))));
        assert_eq!(s.state(), ErwState::Recording);
    }

    #[test]
    fn package_contents_and_cloud_refusal() {
        let (mut s, media) = recorded();
        assert!(matches!(
            build_transfer_package(&s, &media, TransferDestination::TrainerDevice),
            Err(ErwError::State { .. })
        ));
        s.finish().unwrap();
        let pkg = build_transfer_package(&s, &media, TransferDestination::TrainerDevice).unwrap();
        let paths: Vec<_> = pkg.manifest.items.iter().map(|i| i.path.as_str()).collect();
        assert_eq!(paths, ["erw.json", "trace.csv", "media/ph1", "media/ph2", "media/vid1"]);
        let video = pkg.manifest.items.iter().find(|i| i.id == "vid1").unwrap();
        assert_eq!(video.class, DataClass::LocalOnly);

        match build_transfer_package(&s, &media, TransferDestination::Cloud) {
            Err(ErwError::Classification(msg)) => assert_eq!(msg, "raw-erw-is-not-cloud-syncable"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn accept_round_trip_and_tamper() {
        let (mut s, media) = recorded();
        s.finish().unwrap();
        let pkg = build_transfer_package(&s, &media, TransferDestination::TrainerDevice).unwrap();
        let (back, back_media) = accept_package(&pkg).unwrap();
        assert_eq!(back, s);
        assert_eq!(back_media, media);

        let mut tampered = pkg.clone();
        tampered.payloads.get_mut("media/ph1").unwrap()[0] ^= 0xff;
        assert!(matches!(accept_package(&tampered), Err(ErwError::Integrity(id)) if id == "ph1"));
    }

    #[test]
    fn package_on_disk() {
        let (mut s, media) = recorded();
        s.finish().unwrap();
        let pkg = build_transfer_package(&s, &media, TransferDestination::TrainerDevice).unwrap();
        let dir = tempfile::tempdir().unwrap();
        pkg.write_to_dir(dir.path()).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        let classes: Vec<_> = manifest["items"]
            .as_array()
            .unwrap()
            .iter()
            .map(|i| i["class"].as_str().unwrap().to_owned())
            .collect();
        assert_eq!(classes, ["PEER", "PEER", "PEER", "PEER", "LOCAL_ONLY"]);
        let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert!(trace.starts_with("ts_ms,lat_deg,lon_deg,accuracy_m\n"));
        let back = TransferPackage::read_from_dir(dir.path()).unwrap();
        assert_eq!(back, pkg);

        fs::write(dir.path().join("trace.csv"), "ts_ms,lat_deg,lon_deg,accuracy_m\n").unwrap();
        let back = TransferPackage::read_from_dir(dir.path()).unwrap();
        assert!(matches!(accept_package(&back), Err(ErwError::Integrity(_))));
    }

    #[test]
    fn missing_media_is_reported() {
        let (mut s, _) = recorded();
        s.finish().unwrap();
        assert!(matches!(
            build_transfer_package(&s, &MediaLibrary::new(), TransferDestination::TrainerDevice),
            Err(ErwError::MissingAsset(_))
        ));
    }
}
