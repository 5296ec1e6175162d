//! Persist/load identity over every entity kind the store holds.

use std::path::Path;

use routecoach::config::AppConfig;
use routecoach::service::{ConsentRequest, SimulateRequest};
use routecoach::store::{StoredNegotiation, Store};
use routecoach_core::engine::{SessionRecord, Supervision, TrainingEvent};
use routecoach_core::erw::ErwSession;
use routecoach_core::ids::{AssetId, WayId};
use routecoach_core::media::MediaAsset;
use routecoach_core::privacy::ConsentScope;
use routecoach_core::route::{RouteDefinition, Way};
use routecoach_core::sim::WalkerProfile;

use super::{service, way, working_route, T0};

#[derive(Debug, PartialEq)]
pub struct Entities {
    pub way: Way,
    pub routes: Vec<RouteDefinition>,
    pub erw: ErwSession,
    pub media: Vec<MediaAsset>,
    pub negotiation: StoredNegotiation,
    pub transcript: String,
    pub record: SessionRecord,
    pub events: Vec<TrainingEvent>,
    pub consent: String,
}

/// Runs the whole workflow once and returns what the service handed back.
pub fn populate(dir: &Path, way_id: &str) -> (Way, RouteDefinition, SessionRecord) {
    let svc = service(dir, AppConfig::default());
    let route = working_route(&svc, way_id);
    svc.grant_consent(ConsentRequest {
        user_id: "u1".into(),
        scope: ConsentScope::TrainingTelemetry,
        disclosure: "Your position is recorded during this walk.".into(),
        ts_ms: T0,
    })
    .unwrap();
    let mut profile = WalkerProfile::clean();
    profile.gps_noise_sigma_m = 3.0;
    let record = svc
        .simulate(
            route.id(),
            SimulateRequest {
                profile,
                seed: 7,
                supervision: Supervision::AppOnly,
                modalities: routecoach::service::default_modalities(),
            },
        )
        .unwrap();
    (way(way_id), route, record)
}

pub fn load(store: &Store, way_id: &str) -> Entities {
    let way_id = WayId::new(way_id);
    let route_id = routecoach_core::ids::RouteId::new(format!("{way_id}-route"));
    let routes = store
        .route_versions(&route_id)
        .into_iter()
        .map(|v| store.load_route(&route_id, Some(v)).unwrap())
        .collect();
    let erw_id = store
        .erw_ids()
        .into_iter()
        .find(|e| e.as_str().starts_with(way_id.as_str()))
        .unwrap();
    let (erw, _) = store.load_erw(&erw_id).unwrap();
    let media = media_ids(store)
        .iter()
        .map(|id| store.load_media(id).unwrap())
        .collect();
    let neg_id = store.route_negotiation(&route_id).unwrap();
    let (negotiation, _) = store.load_negotiation(&neg_id).unwrap();
    let session = store.records_for_way(&way_id).unwrap().remove(0);
    Entities {
        way: store.load_way(&way_id).unwrap(),
        routes,
        erw,
        media,
        transcript: store.load_transcript(&neg_id).unwrap(),
        negotiation,
        events: store.load_events(session.session_id()).unwrap(),
        record: session,
        consent: store.consent_ndjson().unwrap(),
    }
}

fn media_ids(store: &Store) -> Vec<AssetId> {
    store
        .list("media/")
        .iter()
        .filter_map(|k| k.strip_prefix("media/")?.strip_suffix(".json"))
        .map(AssetId::new)
        .collect()
}

fn canonical<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec(value).unwrap();
    out.push(b'\n');
    out
}

/// Every typed document re-encodes to exactly the bytes on disk.
pub fn documents_are_canonical(store: &Store, e: &Entities) -> Result<(), String> {
    let mut docs = vec![
        (format!("ways/{}.json", e.way.id), canonical(&e.way)),
        (format!("erw/{}.json", e.erw.id()), canonical(&e.erw)),
        (format!("sessions/{}/record.json", e.record.session_id()), canonical(&e.record)),
        (
            format!("negotiations/{}/session.json", e.negotiation.session.id()),
            canonical(&e.negotiation),
        ),
    ];
    for r in &e.routes {
        docs.push((format!("routes/{}/v{:06}.json", r.id(), r.version()), canonical(r)));
    }
    for m in &e.media {
        docs.push((format!("media/{}.bin", m.id), m.bytes.clone()));
    }
    for (rel, expected) in docs {
        let (bytes, _) = store.get_bytes(&rel).map_err(|err| format!("{rel}: {err}"))?;
        if bytes != expected {
            return Err(format!("{rel} does not re-encode to its stored bytes"));
        }
    }
    let events: String = e.events.iter().map(|ev| ev.to_json_line() + "\n").collect();
    let (log, _) = store
        .get_bytes(&format!("sessions/{}/events.ndjson", e.record.session_id()))
        .map_err(|err| err.to_string())?;
    if log != events.as_bytes() {
        return Err("event log does not re-encode to its stored bytes".into());
    }
    Ok(())
}

/// Persists a full workflow, reopens the store cold and compares.
pub fn roundtrip(dir: &Path) -> Result<(), String> {
    let (way, route, record) = populate(dir, "rt");
    let warm = load(&Store::open(dir).map_err(|e| e.to_string())?, "rt");
    let cold_store = Store::open(dir).map_err(|e| e.to_string())?;
    let cold = load(&cold_store, "rt");
    if warm != cold {
        return Err("a reopened store loads different entities".into());
    }
    if cold.way != way {
        return Err("way differs after reload".into());
    }
    if cold.routes.last() != Some(&route) {
        return Err("working route differs after reload".into());
    }
    if cold.record != record || cold.events != record.events() {
        return Err("session record or its event log differs after reload".into());
    }
    if cold.routes.len() < 3 || cold.media.len() < 5 || cold.consent.lines().count() < 1 {
        return Err(format!(
            "expected every entity kind to be populated, got {} routes, {} media, consent {:?}",
            cold.routes.len(),
            cold.media.len(),
            cold.consent
        ));
    }
    documents_are_canonical(&cold_store, &cold)
}
