//! Directory-per-entity persistence with an integrity index.
//!
//! Every document is canonical compact JSON written through a temp file and
//! a rename. `index.json` records a SHA-256 and a revision per document, so
//! a truncated or edited file is reported instead of half-loaded. Append-only
//! logs (`*.ndjson`) record their length instead of a hash.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use routecoach_core::engine::{SessionRecord, TrainingEvent};
use routecoach_core::erw::ErwSession;
use routecoach_core::ids::{AssetId, ErwId, NegotiationId, RouteId, SessionId, WayId};
use routecoach_core::design::NegotiationSession;
use routecoach_core::media::{sha256_hex, MediaAsset, MediaKind};
use routecoach_core::privacy::{
    classify, gate_sync, ConsentLedgerLine, GateMode, ItemKind, PrivacyError, SyncDestination, SyncItem,
    SyncManifest,
};
use routecoach_core::route::{RouteDefinition, Way};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const INDEX_FILE: &str = "index.json";
pub const CLOUD_DIR: &str = "cloud";
const CONSENT_LOG: &str = "consent.ndjson";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict on {path}: {detail}")]
    Conflict { path: String, detail: String },
    #[error("integrity error on {path}: {detail}")]
    Integrity { path: String, detail: String },
    #[error("`{0}` is not a usable identifier")]
    BadId(String),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Precondition on the current revision of a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Absent,
    Rev(u64),
    Any,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct IndexEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sha256: Option<String>,
    len: u64,
    rev: u64,
}

/// Ids become path components, so they are restricted to a safe alphabet.
pub fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_.".contains(&b));
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadId(id.to_owned()))
    }
}

fn canonical<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec(value).expect("entity serializes");
    out.push(b'\n');
    out
}

fn route_file(id: &RouteId, version: u32) -> String {
    format!("routes/{id}/v{version:06}.json")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct MediaMeta {
    kind: MediaKind,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Pointer {
    id: String,
}

/// A negotiation together with the stored route version it started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredNegotiation {
    pub base_version: u32,
    pub session: NegotiationSession,
}

/// One artifact offered for cloud sync. Its class is derived from `kind`.
#[derive(Debug, Clone)]
pub struct CloudItem {
    pub id: String,
    pub kind: ItemKind,
    /// Destination relative to the cloud directory.
    pub rel: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub manifest: String,
    pub written: Vec<String>,
    pub removed: Vec<String>,
}

pub struct Store {
    root: PathBuf,
    index: Mutex<BTreeMap<String, IndexEntry>>,
    route_locks: Mutex<HashMap<RouteId, Arc<Mutex<()>>>>,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let index_path = root.join(INDEX_FILE);
        let index = match fs::read(&index_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| StoreError::Integrity {
                path: INDEX_FILE.into(),
                detail: e.to_string(),
            })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            root,
            index: Mutex::new(index),
            route_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn cloud_dir(&self) -> PathBuf {
        self.root.join(CLOUD_DIR)
    }

    fn write_atomic(&self, rel: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn save_index(&self, index: &BTreeMap<String, IndexEntry>) -> Result<(), StoreError> {
        self.write_atomic(INDEX_FILE, &canonical(index))
    }

    fn check_expect(rel: &str, current: Option<&IndexEntry>, expect: Expect) -> Result<(), StoreError> {
        let ok = match (expect, current) {
            (Expect::Any, _) | (Expect::Absent, None) => true,
            (Expect::Rev(r), Some(e)) => e.rev == r,
            _ => false,
        };
        if ok {
            return Ok(());
        }
        Err(StoreError::Conflict {
            path: rel.to_owned(),
            detail: format!("expected {expect:?}, found revision {:?}", current.map(|e| e.rev)),
        })
    }

    /// Writes a document and returns its new revision.
    pub fn put_bytes(&self, rel: &str, bytes: &[u8], expect: Expect) -> Result<u64, StoreError> {
        let mut index = self.index.lock().expect("store index poisoned");
        Self::check_expect(rel, index.get(rel), expect)?;
        self.write_atomic(rel, bytes)?;
        let rev = index.get(rel).map_or(1, |e| e.rev + 1);
        index.insert(
            rel.to_owned(),
            IndexEntry {
                sha256: Some(sha256_hex(bytes)),
                len: bytes.len() as u64,
                rev,
            },
        );
        self.save_index(&index)?;
        Ok(rev)
    }

    /// Reads a document after checking it against the index.
    pub fn get_bytes(&self, rel: &str) -> Result<(Vec<u8>, u64), StoreError> {
        let entry = self
            .index
            .lock()
            .expect("store index poisoned")
            .get(rel)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(rel.to_owned()))?;
        let bytes = fs::read(self.root.join(rel)).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::Integrity {
                path: rel.to_owned(),
                detail: "indexed file is missing".into(),
            },
            _ => e.into(),
        })?;
        let intact = bytes.len() as u64 == entry.len
            && entry.sha256.as_deref().is_none_or(|h| h == sha256_hex(&bytes));
        if !intact {
            return Err(StoreError::Integrity {
                path: rel.to_owned(),
                detail: format!("expected {} bytes matching the index, found {}", entry.len, bytes.len()),
            });
        }
        Ok((bytes, entry.rev))
    }

    pub fn put_json<T: Serialize>(&self, rel: &str, value: &T, expect: Expect) -> Result<u64, StoreError> {
        self.put_bytes(rel, &canonical(value), expect)
    }

    pub fn get_json<T: DeserializeOwned>(&self, rel: &str) -> Result<(T, u64), StoreError> {
        let (bytes, rev) = self.get_bytes(rel)?;
        let value = serde_json::from_slice(&bytes).map_err(|e| StoreError::Integrity {
            path: rel.to_owned(),
            detail: e.to_string(),
        })?;
        Ok((value, rev))
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.index.lock().expect("store index poisoned").contains_key(rel)
    }

    /// Keys under a prefix, in order.
    pub fn list(&self, prefix: &str) -> Vec<String> {
        self.index
            .lock()
            .expect("store index poisoned")
            .range(prefix.to_owned()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Appends complete lines to a log.
    pub fn append_lines(&self, rel: &str, lines: &[String]) -> Result<(), StoreError> {
        if lines.is_empty() {
            return Ok(());
        }
        let mut buf = String::new();
        for l in lines {
            debug_assert!(!l.contains('\n'));
            buf.push_str(l);
            buf.push('\n');
        }
        let mut index = self.index.lock().expect("store index poisoned");
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let before = index.get(rel).cloned();
        let on_disk = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        if on_disk != before.as_ref().map_or(0, |e| e.len) {
            return Err(StoreError::Integrity {
                path: rel.to_owned(),
                detail: format!("log has {on_disk} bytes, index expects {}", before.map_or(0, |e| e.len)),
            });
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        f.write_all(buf.as_bytes())?;
        f.sync_data()?;
        let entry = IndexEntry {
            sha256: None,
            len: on_disk + buf.len() as u64,
            rev: before.map_or(1, |e| e.rev + 1),
        };
        index.insert(rel.to_owned(), entry);
        self.save_index(&index)
    }

    /// Lines of a log; an absent log is empty.
    pub fn read_lines(&self, rel: &str) -> Result<Vec<String>, StoreError> {
        if !self.exists(rel) {
            return Ok(Vec::new());
        }
        let (bytes, _) = self.get_bytes(rel)?;
        let text = String::from_utf8(bytes).map_err(|e| StoreError::Integrity {
            path: rel.to_owned(),
            detail: e.to_string(),
        })?;
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(StoreError::Integrity {
                path: rel.to_owned(),
                detail: "last line is incomplete".into(),
            });
        }
        Ok(text.lines().map(str::to_owned).collect())
    }

    fn read_log<T: DeserializeOwned>(&self, rel: &str) -> Result<Vec<T>, StoreError> {
        self.read_lines(rel)?
            .iter()
            .enumerate()
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| StoreError::Integrity {
                    path: rel.to_owned(),
                    detail: format!("line {}: {e}", n + 1),
                })
            })
            .collect()
    }

    // -----------------------------------------------------------------------
    // Ways

    pub fn create_way(&self, way: &Way) -> Result<(), StoreError> {
        check_id(way.id.as_str())?;
        self.put_json(&format!("ways/{}.json", way.id), way, Expect::Absent)?;
        Ok(())
    }

    pub fn load_way(&self, id: &WayId) -> Result<Way, StoreError> {
        check_id(id.as_str())?;
        Ok(self.get_json(&format!("ways/{id}.json"))?.0)
    }

    // -----------------------------------------------------------------------
    // Routes

    fn route_lock(&self, id: &RouteId) -> Arc<Mutex<()>> {
        self.route_locks
            .lock()
            .expect("route locks poisoned")
            .entry(id.clone())
            .or_default()
            .clone()
    }

    pub fn route_versions(&self, id: &RouteId) -> Vec<u32> {
        self.list(&format!("routes/{id}/v"))
            .iter()
            .filter_map(|k| k.rsplit('/').next()?.strip_prefix('v')?.strip_suffix(".json")?.parse().ok())
            .collect()
    }

    pub fn latest_route_version(&self, id: &RouteId) -> Option<u32> {
        self.route_versions(id).into_iter().max()
    }

    /// Stores a new route version. `base` is the version the caller edited,
    /// `None` for a new route; a different latest version is a conflict.
    pub fn save_route(&self, route: &RouteDefinition, base: Option<u32>) -> Result<(), StoreError> {
        check_id(route.id().as_str())?;
        let lock = self.route_lock(route.id());
        let _guard = lock.lock().expect("route lock poisoned");
        let latest = self.latest_route_version(route.id());
        let rel = route_file(route.id(), route.version());
        if latest != base {
            return Err(StoreError::Conflict {
                path: rel,
                detail: format!("based on version {base:?}, latest is {latest:?}"),
            });
        }
        if route.version() <= latest.unwrap_or(0) {
            return Err(StoreError::Conflict {
                path: rel,
                detail: format!("version {} does not advance past {latest:?}", route.version()),
            });
        }
        self.put_json(&rel, route, Expect::Absent)?;
        Ok(())
    }

    /// A specific version, or the latest when `version` is `None`.
    pub fn load_route(&self, id: &RouteId, version: Option<u32>) -> Result<RouteDefinition, StoreError> {
        check_id(id.as_str())?;
        let v = match version {
            Some(v) => v,
            None => self
                .latest_route_version(id)
                .ok_or_else(|| StoreError::NotFound(format!("route {id}")))?,
        };
        Ok(self.get_json(&route_file(id, v))?.0)
    }

    // -----------------------------------------------------------------------
    // Media

    /// Stores a blob. Re-storing identical bytes under the same id is a no-op.
    pub fn put_media(&self, asset: &MediaAsset) -> Result<(), StoreError> {
        check_id(asset.id.as_str())?;
        let meta_rel = format!("media/{}.json", asset.id);
        let meta = MediaMeta {
            kind: asset.kind,
            sha256: asset.sha256(),
        };
        if let Ok((existing, _)) = self.get_json::<MediaMeta>(&meta_rel) {
            if existing == meta {
                return Ok(());
            }
            return Err(StoreError::Conflict {
                path: meta_rel,
                detail: "asset id already holds different content".into(),
            });
        }
        self.put_bytes(&format!("media/{}.bin", asset.id), &asset.bytes, Expect::Absent)?;
        self.put_json(&meta_rel, &meta, Expect::Absent)?;
        Ok(())
    }

    pub fn load_media(&self, id: &AssetId) -> Result<MediaAsset, StoreError> {
        check_id(id.as_str())?;
        let (meta, _): (MediaMeta, _) = self.get_json(&format!("media/{id}.json"))?;
        let (bytes, _) = self.get_bytes(&format!("media/{id}.bin"))?;
        if sha256_hex(&bytes) != meta.sha256 {
            return Err(StoreError::Integrity {
                path: format!("media/{id}.bin"),
                detail: "content does not match its metadata hash".into(),
            });
        }
        Ok(MediaAsset::new(id.clone(), meta.kind, bytes))
    }

    pub fn media_kind(&self, id: &AssetId) -> Result<MediaKind, StoreError> {
        check_id(id.as_str())?;
        Ok(self.get_json::<MediaMeta>(&format!("media/{id}.json"))?.0.kind)
    }

    // -----------------------------------------------------------------------
    // Exploratory walks

    pub fn save_erw(&self, session: &ErwSession, expect: Expect) -> Result<u64, StoreError> {
        check_id(session.id().as_str())?;
        self.put_json(&format!("erw/{}.json", session.id()), session, expect)
    }

    pub fn load_erw(&self, id: &ErwId) -> Result<(ErwSession, u64), StoreError> {
        check_id(id.as_str())?;
        self.get_json(&format!("erw/{id}.json"))
    }

    pub fn erw_ids(&self) -> Vec<ErwId> {
        self.list("erw/")
            .iter()
            .filter_map(|k| k.strip_prefix("erw/")?.strip_suffix(".json"))
            .filter(|k| !k.contains('/'))
            .map(ErwId::from)
            .collect()
    }

    pub fn set_active_erw(&self, way: &WayId, erw: Option<&ErwId>) -> Result<(), StoreError> {
        check_id(way.as_str())?;
        let rel = format!("erw/active/{way}.json");
        let ptr = erw.map(|e| Pointer { id: e.to_string() });
        self.put_json(&rel, &ptr, Expect::Any)?;
        Ok(())
    }

    pub fn active_erw(&self, way: &WayId) -> Result<Option<ErwId>, StoreError> {
        check_id(way.as_str())?;
        let rel = format!("erw/active/{way}.json");
        if !self.exists(&rel) {
            return Ok(None);
        }
        let (ptr, _): (Option<Pointer>, _) = self.get_json(&rel)?;
        Ok(ptr.map(|p| ErwId::new(p.id)))
    }

    // -----------------------------------------------------------------------
    // Negotiations

    pub fn save_negotiation(&self, neg: &StoredNegotiation, expect: Expect) -> Result<u64, StoreError> {
        let id = neg.session.id();
        check_id(id.as_str())?;
        check_id(neg.session.route().id().as_str())?;
        let rev = self.put_json(&format!("negotiations/{id}/session.json"), neg, expect)?;
        let ptr = Pointer { id: id.to_string() };
        self.put_json(&format!("routes/{}/negotiation.json", neg.session.route().id()), &ptr, Expect::Any)?;
        Ok(rev)
    }

    pub fn load_negotiation(&self, id: &NegotiationId) -> Result<(StoredNegotiation, u64), StoreError> {
        check_id(id.as_str())?;
        self.get_json(&format!("negotiations/{id}/session.json"))
    }

    pub fn route_negotiation(&self, route: &RouteId) -> Result<NegotiationId, StoreError> {
        check_id(route.as_str())?;
        let rel = format!("routes/{route}/negotiation.json");
        if !self.exists(&rel) {
            return Err(StoreError::NotFound(format!("negotiation for route {route}")));
        }
        let (ptr, _): (Pointer, _) = self.get_json(&rel)?;
        Ok(NegotiationId::new(ptr.id))
    }

    pub fn append_transcript(&self, id: &NegotiationId, lines: &[String]) -> Result<(), StoreError> {
        check_id(id.as_str())?;
        self.append_lines(&format!("negotiations/{id}/transcript.ndjson"), lines)
    }

    pub fn load_transcript(&self, id: &NegotiationId) -> Result<String, StoreError> {
        check_id(id.as_str())?;
        let lines = self.read_lines(&format!("negotiations/{id}/transcript.ndjson"))?;
        Ok(lines.into_iter().map(|l| l + "\n").collect())
    }

    // -----------------------------------------------------------------------
    // Training sessions

    pub fn append_events(&self, id: &SessionId, events: &[TrainingEvent]) -> Result<(), StoreError> {
        check_id(id.as_str())?;
        let lines: Vec<String> = events.iter().map(TrainingEvent::to_json_line).collect();
        self.append_lines(&format!("sessions/{id}/events.ndjson"), &lines)
    }

    pub fn load_events(&self, id: &SessionId) -> Result<Vec<TrainingEvent>, StoreError> {
        check_id(id.as_str())?;
        self.read_log(&format!("sessions/{id}/events.ndjson"))
    }

    pub fn session_exists(&self, id: &SessionId) -> bool {
        check_id(id.as_str()).is_ok() && !self.list(&format!("sessions/{id}/")).is_empty()
    }

    pub fn save_record(&self, record: &SessionRecord) -> Result<(), StoreError> {
        check_id(record.session_id().as_str())?;
        self.put_json(&format!("sessions/{}/record.json", record.session_id()), record, Expect::Absent)?;
        Ok(())
    }

    pub fn load_record(&self, id: &SessionId) -> Result<SessionRecord, StoreError> {
        check_id(id.as_str())?;
        Ok(self.get_json(&format!("sessions/{id}/record.json"))?.0)
    }

    /// Finished sessions on a way, in start order.
    pub fn records_for_way(&self, way: &WayId) -> Result<Vec<SessionRecord>, StoreError> {
        let mut out = Vec::new();
        for key in self.list("sessions/") {
            if key.ends_with("/record.json") {
                let (r, _): (SessionRecord, _) = self.get_json(&key)?;
                if r.way_id() == way {
                    out.push(r);
                }
            }
        }
        out.sort_by(|a, b| (a.started_ts_ms(), a.session_id()).cmp(&(b.started_ts_ms(), b.session_id())));
        Ok(out)
    }

    // -----------------------------------------------------------------------
    // Consent ledger

    pub fn append_consent(&self, lines: &[ConsentLedgerLine]) -> Result<(), StoreError> {
        let lines: Vec<String> = lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("ledger line serializes"))
            .collect();
        self.append_lines(CONSENT_LOG, &lines)
    }

    pub fn consent_ndjson(&self) -> Result<String, StoreError> {
        Ok(self.read_lines(CONSENT_LOG)?.into_iter().map(|l| l + "\n").collect())
    }

    // -----------------------------------------------------------------------
    // Cloud sync

    /// The only way anything reaches the cloud directory. Items are
    /// classified from their kind and passed through the sync gate; in strict
    /// mode a single violation writes nothing.
    pub fn sync_to_cloud(&self, items: Vec<CloudItem>, mode: GateMode) -> Result<SyncReport, StoreError> {
        let manifest = SyncManifest {
            destination: SyncDestination::Cloud,
            items: items
                .iter()
                .map(|i| SyncItem::new(i.id.clone(), classify(i.kind), &i.bytes))
                .collect(),
        };
        let outcome = gate_sync(&manifest, SyncDestination::Cloud, mode)?;
        let mut written = Vec::new();
        for item in &items {
            if outcome.permitted.items.iter().any(|p| p.id == item.id) {
                let rel = format!("{CLOUD_DIR}/{}", item.rel);
                if rel.split('/').any(|c| c.is_empty() || c.starts_with('.')) {
                    return Err(StoreError::BadId(item.rel.clone()));
                }
                self.put_bytes(&rel, &item.bytes, Expect::Any)?;
                written.push(rel);
            }
        }
        let n = self.list(&format!("{CLOUD_DIR}/manifests/")).len() + 1;
        let manifest_rel = format!("{CLOUD_DIR}/manifests/{n:06}.json");
        self.put_json(&manifest_rel, &outcome.permitted, Expect::Absent)?;
        Ok(SyncReport {
            manifest: manifest_rel,
            written,
            removed: outcome.removed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_restricted() {
        assert!(check_id("route-1_a.b").is_ok());
        for bad in ["", "..", ".hidden", "a/b", "a b", "ä"] {
            assert!(check_id(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn expect_preconditions() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.put_bytes("a.json", b"1", Expect::Absent).unwrap(), 1);
        assert!(matches!(
            store.put_bytes("a.json", b"2", Expect::Absent),
            Err(StoreError::Conflict { .. })
        ));
        assert!(store.put_bytes("a.json", b"2", Expect::Rev(7)).is_err());
        assert_eq!(store.put_bytes("a.json", b"2", Expect::Rev(1)).unwrap(), 2);
        assert_eq!(store.get_bytes("a.json").unwrap(), (b"2".to_vec(), 2));
    }

    #[test]
    fn log_appends_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = Store::open(dir.path()).unwrap();
            store.append_lines("l.ndjson", &["{}".into(), "[]".into()]).unwrap();
            store.append_lines("l.ndjson", &["1".into()]).unwrap();
        }
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.read_lines("l.ndjson").unwrap(), vec!["{}", "[]", "1"]);
    }
}
