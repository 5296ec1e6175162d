//! Data classification, sync gating and per-session consent.
//!
//! Every artifact carries one of three classes. Only `CloudSyncable` items
//! may leave the trainer's devices; video never does.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{SessionId, UserId};
use crate::media::sha256_hex;

const DAY_MS: i64 = 86_400_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("unknown item kind `{0}`")]
    Classification(String),
    #[error("sync policy violation: {} item(s) may not go to the cloud: {}", offending.len(), offending.join(", "))]
    SyncPolicy { offending: Vec<String> },
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("manifest is addressed to {manifest:?}, not {requested:?}")]
    DestinationMismatch {
        manifest: SyncDestination,
        requested: SyncDestination,
    },
    #[error("consent requires a non-empty disclosure text")]
    EmptyDisclosure,
    #[error("consent required: {0}")]
    ConsentRequired(String),
    #[error("consent {id} was already spent by session {session}")]
    ConsentSpent { id: String, session: SessionId },
    #[error("consent {id} is not valid at {ts_ms}")]
    ConsentExpired { id: String, ts_ms: i64 },
    #[error("consent {id} covers {granted}, not {needed}")]
    ConsentScope {
        id: String,
        granted: ConsentScope,
        needed: ConsentScope,
    },
    #[error("consent {0} already granted")]
    DuplicateGrant(String),
    #[error("consent ledger: {0}")]
    Ledger(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DataClass {
    #[serde(rename = "LOCAL_ONLY")]
    LocalOnly,
    #[serde(rename = "PEER")]
    PeerTransferable,
    #[serde(rename = "CLOUD")]
    CloudSyncable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ItemKind {
    VideoAsset,
    RawErwSession,
    PoiPhoto { curated: bool },
    WorkingRoute,
    SessionRecord,
    NegotiationTranscript,
}

impl ItemKind {
    pub const ALL: [ItemKind; 7] = [
        ItemKind::VideoAsset,
        ItemKind::RawErwSession,
        ItemKind::PoiPhoto { curated: false },
        ItemKind::PoiPhoto { curated: true },
        ItemKind::WorkingRoute,
        ItemKind::SessionRecord,
        ItemKind::NegotiationTranscript,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ItemKind::VideoAsset => "video_asset",
            ItemKind::RawErwSession => "raw_erw_session",
            ItemKind::PoiPhoto { curated: false } => "poi_photo",
            ItemKind::PoiPhoto { curated: true } => "curated_poi_photo",
            ItemKind::WorkingRoute => "working_route",
            ItemKind::SessionRecord => "session_record",
            ItemKind::NegotiationTranscript => "negotiation_transcript",
        }
    }
}

impl FromStr for ItemKind {
    type Err = PrivacyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ItemKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PrivacyError::Classification(s.to_owned()))
    }
}

/// Curation is the promotion boundary: raw capture stays between the
/// trainee's and trainer's devices until it is part of a working route.
pub fn classify(kind: ItemKind) -> DataClass {
    match kind {
        ItemKind::VideoAsset => DataClass::LocalOnly,
        ItemKind::RawErwSession | ItemKind::PoiPhoto { curated: false } => DataClass::PeerTransferable,
        ItemKind::PoiPhoto { curated: true }
        | ItemKind::WorkingRoute
        | ItemKind::SessionRecord
        | ItemKind::NegotiationTranscript => DataClass::CloudSyncable,
    }
}

pub fn classify_name(kind: &str) -> Result<DataClass, PrivacyError> {
    kind.parse().map(classify)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncDestination {
    Peer,
    Cloud,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncItem {
    pub id: String,
    /// `None` for items nobody classified; those never travel.
    pub class: Option<DataClass>,
    pub sha256: String,
}

impl SyncItem {
    pub fn new(id: impl Into<String>, class: DataClass, bytes: &[u8]) -> Self {
        Self {
            id: id.into(),
            class: Some(class),
            sha256: sha256_hex(bytes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncManifest {
    pub destination: SyncDestination,
    pub items: Vec<SyncItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Any violation rejects the whole manifest.
    #[default]
    Strict,
    /// Violating items are dropped and reported.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateOutcome {
    pub permitted: SyncManifest,
    pub removed: Vec<String>,
}

fn well_formed(manifest: &SyncManifest) -> Result<(), PrivacyError> {
    let mut ids = BTreeSet::new();
    for item in &manifest.items {
        if item.id.is_empty() {
            return Err(PrivacyError::MalformedManifest("empty item id".into()));
        }
        if !ids.insert(item.id.as_str()) {
            return Err(PrivacyError::MalformedManifest(format!("duplicate item `{}`", item.id)));
        }
        if item.sha256.len() != 64 || !item.sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(PrivacyError::MalformedManifest(format!(
                "item `{}` has an invalid sha256",
                item.id
            )));
        }
    }
    Ok(())
}

pub fn permitted_at(class: Option<DataClass>, destination: SyncDestination) -> bool {
    match (destination, class) {
        (_, None) => false,
        (SyncDestination::Peer, Some(_)) => true,
        (SyncDestination::Cloud, Some(c)) => c == DataClass::CloudSyncable,
    }
}

/// Filters or rejects a manifest for its destination.
pub fn gate_sync(
    manifest: &SyncManifest,
    destination: SyncDestination,
    mode: GateMode,
) -> Result<GateOutcome, PrivacyError> {
    well_formed(manifest)?;
    if manifest.destination != destination {
        return Err(PrivacyError::DestinationMismatch {
            manifest: manifest.destination,
            requested: destination,
        });
    }
    let (keep, drop): (Vec<_>, Vec<_>) = manifest
        .items
        .iter()
        .cloned()
        .partition(|i| permitted_at(i.class, destination));
    let removed: Vec<String> = drop.into_iter().map(|i| i.id).collect();
    if mode == GateMode::Strict && !removed.is_empty() {
        return Err(PrivacyError::SyncPolicy { offending: removed });
    }
    Ok(GateOutcome {
        permitted: SyncManifest {
            destination,
            items: keep,
        },
        removed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConsentScope {
    #[serde(rename = "training-telemetry")]
    TrainingTelemetry,
    #[serde(rename = "erw-recording")]
    ErwRecording,
}

impl fmt::Display for ConsentScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConsentScope::TrainingTelemetry => "training-telemetry",
            ConsentScope::ErwRecording => "erw-recording",
        })
    }
}

/// Permission granted right before one session. Valid for a single session
/// starting on the same (UTC) day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRecord {
    pub user_id: UserId,
    pub scope: ConsentScope,
    pub granted_ts_ms: i64,
    pub disclosure_sha256: String,
}

impl ConsentRecord {
    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.user_id, self.scope, self.granted_ts_ms)
    }

    pub fn valid_at(&self, ts_ms: i64) -> bool {
        ts_ms >= self.granted_ts_ms && ts_ms.div_euclid(DAY_MS) == self.granted_ts_ms.div_euclid(DAY_MS)
    }
}

/// One line of the consent ledger file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentLedgerLine {
    pub user_id: UserId,
    pub scope: ConsentScope,
    pub granted_ts_ms: i64,
    pub session_id: Option<SessionId>,
    pub disclosure_sha256: String,
}

#[derive(Debug, Default)]
struct LedgerState {
    granted: HashMap<String, ConsentRecord>,
    spent: HashMap<String, SessionId>,
    lines: Vec<ConsentLedgerLine>,
}

/// Append-only record of grants and the sessions that spent them.
#[derive(Debug, Default)]
pub struct ConsentLedger {
    state: Mutex<LedgerState>,
}

impl ConsentLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn grant_consent(
        &self,
        user_id: &UserId,
        scope: ConsentScope,
        disclosure: &str,
        granted_ts_ms: i64,
    ) -> Result<ConsentRecord, PrivacyError> {
        if disclosure.trim().is_empty() {
            return Err(PrivacyError::EmptyDisclosure);
        }
        let record = ConsentRecord {
            user_id: user_id.clone(),
            scope,
            granted_ts_ms,
            disclosure_sha256: sha256_hex(disclosure.as_bytes()),
        };
        let mut st = self.state.lock().expect("consent ledger poisoned");
        let id = record.id();
        if st.granted.contains_key(&id) {
            return Err(PrivacyError::DuplicateGrant(id));
        }
        st.lines.push(line(&record, None));
        st.granted.insert(id, record.clone());
        Ok(record)
    }

    /// Atomically checks a record and marks it spent by `session_id`.
    pub fn spend(
        &self,
        record: &ConsentRecord,
        session_id: &SessionId,
        needed: ConsentScope,
        now_ts_ms: i64,
    ) -> Result<(), PrivacyError> {
        let id = record.id();
        let mut st = self.state.lock().expect("consent ledger poisoned");
        match st.granted.get(&id) {
            Some(known) if known == record => {}
            _ => return Err(PrivacyError::ConsentRequired(format!("{id} was never granted"))),
        }
        if let Some(session) = st.spent.get(&id) {
            return Err(PrivacyError::ConsentSpent {
                id,
                session: session.clone(),
            });
        }
        if record.scope != needed {
            return Err(PrivacyError::ConsentScope {
                id,
                granted: record.scope,
                needed,
            });
        }
        if !record.valid_at(now_ts_ms) {
            return Err(PrivacyError::ConsentExpired { id, ts_ms: now_ts_ms });
        }
        st.lines.push(line(record, Some(session_id.clone())));
        st.spent.insert(id, session_id.clone());
        Ok(())
    }

    pub fn spent_by(&self, record: &ConsentRecord) -> Option<SessionId> {
        let st = self.state.lock().expect("consent ledger poisoned");
        st.spent.get(&record.id()).cloned()
    }

    pub fn lines(&self) -> Vec<ConsentLedgerLine> {
        self.state.lock().expect("consent ledger poisoned").lines.clone()
    }

    pub fn to_ndjson(&self) -> String {
        self.lines()
            .iter()
            .map(|l| serde_json::to_string(l).expect("ledger line serializes") + "\n")
            .collect()
    }

    pub fn from_ndjson(text: &str) -> Result<Self, PrivacyError> {
        let ledger = Self::new();
        {
            let mut st = ledger.state.lock().expect("fresh mutex");
            for (n, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let l: ConsentLedgerLine = serde_json::from_str(raw)
                    .map_err(|e| PrivacyError::Ledger(format!("line {}: {e}", n + 1)))?;
                let record = ConsentRecord {
                    user_id: l.user_id.clone(),
                    scope: l.scope,
                    granted_ts_ms: l.granted_ts_ms,
                    disclosure_sha256: l.disclosure_sha256.clone(),
                };
                let id = record.id();
                match &l.session_id {
                    None => {
                        st.granted.insert(id, record);
                    }
                    Some(s) => {
                        if !st.granted.contains_key(&id) {
                            return Err(PrivacyError::Ledger(format!(
                                "line {}: spend of unknown grant {id}",
                                n + 1
                            )));
                        }
                        st.spent.insert(id, s.clone());
                    }
                }
                st.lines.push(l);
            }
        }
        Ok(ledger)
    }
}

fn line(record: &ConsentRecord, session_id: Option<SessionId>) -> ConsentLedgerLine {
    ConsentLedgerLine {
        user_id: record.user_id.clone(),
        scope: record.scope,
        granted_ts_ms: record.granted_ts_ms,
        session_id,
        disclosure_sha256: record.disclosure_sha256.clone(),
    }
}
