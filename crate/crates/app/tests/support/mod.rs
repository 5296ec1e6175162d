#![allow(dead_code)]

pub mod entities;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request};
use axum::Router;
use http_body_util::BodyExt;
use routecoach::config::AppConfig;
use routecoach::service::{
    CreateRouteRequest, EditsRequest, ErwFinishRequest, ErwStartRequest, MediaUpload, NegotiationStartRequest,
    PoiCaptureRequest, Service, StepRequest,
};
use routecoach::store::Store;
use routecoach_core::design::{NegotiationAction, RouteEdit};
use routecoach_core::geo::{destination_point, GeoPoint, GpsFix};
use routecoach_core::ids::{AssetId, RouteId, WayId};
use routecoach_core::route::{Instruction, PoiKind, RouteDefinition, Way};
use serde_json::Value;
use tower::ServiceExt;

pub const ORIGIN: GeoPoint = GeoPoint { lat: 45.07, lon: 7.68 };
pub const T0: i64 = 1_760_000_000_000;
pub const VIDEO_BYTES: &[u8] = b"\x00\x00\x00\x18ftypmp42 walk video frames 0123456789";

pub fn service(dir: &std::path::Path, config: AppConfig) -> Arc<Service> {
    Arc::new(Service::open(Store::open(dir).unwrap(), config).unwrap())
}

pub fn way(id: &str) -> Way {
    Way {
        id: WayId::new(id),
        origin_label: "home".into(),
        origin: ORIGIN,
        destination_label: "day centre".into(),
        destination: destination_point(destination_point(ORIGIN, 0.0, 400.0), 90.0, 400.0),
        owner_user_id: "u1".into(),
        direction_note: String::new(),
    }
}

/// 400 m north then 400 m east, one point every 5 m.
pub fn l_walk() -> Vec<GeoPoint> {
    let corner = destination_point(ORIGIN, 0.0, 400.0);
    let mut pts: Vec<GeoPoint> = (0..=80).map(|i| destination_point(ORIGIN, 0.0, i as f64 * 5.0)).collect();
    pts.extend((1..=80).map(|i| destination_point(corner, 90.0, i as f64 * 5.0)));
    pts
}

pub fn photo(name: &str) -> MediaUpload {
    MediaUpload::from_bytes(Some(name), format!("jpeg bytes of {name}").as_bytes())
}

/// Records a walk with three candidates and a video, then returns the draft
/// route created from it.
pub fn record_walk(svc: &Service, way_id: &str) -> RouteDefinition {
    svc.create_way(way(way_id)).unwrap();
    let erw = svc.erw_start(&WayId::new(way_id), ErwStartRequest { ts_ms: T0 }).unwrap();
    let key = erw.id().to_string();
    let pts = l_walk();
    let capture = |i: usize, photos: Vec<MediaUpload>, note: &str| {
        svc.erw_poi(
            way_id,
            PoiCaptureRequest {
                at: GpsFix::new(pts[i], T0 + i as i64 * 4000),
                photos,
                note: note.into(),
                role: Default::default(),
            },
        )
        .unwrap();
    };
    for (i, p) in pts.iter().enumerate() {
        svc.erw_fix(way_id, GpsFix::new(*p, T0 + i as i64 * 4000)).unwrap();
        match i {
            40 => capture(i, vec![photo(&format!("{way_id}-kiosk"))], "kiosk"),
            80 => capture(
                i,
                vec![photo(&format!("{way_id}-bakery-a")), photo(&format!("{way_id}-bakery-b"))],
                "bakery on the corner",
            ),
            150 => capture(i, vec![photo(&format!("{way_id}-gate"))], "green gate"),
            _ => {}
        }
    }
    let video = MediaUpload::from_bytes(Some(&format!("{way_id}-video")), VIDEO_BYTES);
    svc.erw_finish(&key, ErwFinishRequest { video: Some(video) }).unwrap();
    svc.create_route(CreateRouteRequest {
        erw_id: erw.id().clone(),
        route_id: Some(RouteId::new(format!("{way_id}-route"))),
    })
    .unwrap()
}

/// Classifies the candidates: the corner and the gate become landmarks.
pub fn classify(svc: &Service, draft: &RouteDefinition) -> RouteDefinition {
    let edits = draft
        .pois()
        .iter()
        .map(|p| {
            let (kind, instruction) = if p.notes == "kiosk" {
                (PoiKind::Reassurance, None)
            } else {
                (PoiKind::Landmark, Some(Instruction::text(format!("At the {}, turn.", p.notes)).with_symbol("turn")))
            };
            RouteEdit::PromoteCandidate {
                poi_id: p.id.clone(),
                kind,
                instruction,
            }
        })
        .collect();
    svc.route_edits(
        draft.id(),
        EditsRequest {
            base_version: draft.version(),
            edits,
        },
    )
    .unwrap()
}

/// Confirms every POI with its first photo as primary.
pub fn negotiate_all(svc: &Service, route: &RouteDefinition) {
    svc.negotiation_start(route.id(), NegotiationStartRequest { ts_ms: T0 }).unwrap();
    for (i, poi) in route.pois().iter().enumerate() {
        let ts = T0 + 10_000 * i as i64;
        let step = |a: NegotiationAction| {
            let mut req = StepRequest::action(a, ts);
            req.poi_id = Some(poi.id.clone());
            svc.negotiation_step(route.id(), req).unwrap();
        };
        step(NegotiationAction::SelectPhoto(poi.photos[0].clone()));
        if poi.kind == PoiKind::Landmark {
            step(NegotiationAction::ApproveInstruction);
        }
        step(NegotiationAction::Confirm);
    }
}

/// Walk, curation and negotiation up to a stored working route.
pub fn working_route(svc: &Service, way_id: &str) -> RouteDefinition {
    let draft = record_walk(svc, way_id);
    let classified = classify(svc, &draft);
    negotiate_all(svc, &classified);
    svc.negotiation_finalize(classified.id()).unwrap().route
}

pub fn video_id(way_id: &str) -> AssetId {
    AssetId::new(format!("{way_id}-video"))
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (u16, Value) {
    let (status, bytes) = call_raw(app, method, uri, body).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub async fn call_raw(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (u16, Vec<u8>) {
    call_as(app, None, method, uri, body).await
}

/// Like `call_raw`, with an optional bearer token.
pub async fn call_as(app: &Router, token: Option<&str>, method: Method, uri: &str, body: Option<Value>) -> (u16, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status().as_u16();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}
