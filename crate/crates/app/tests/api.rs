mod support;

use axum::http::Method;
use routecoach::api::router;
use routecoach::config::{AppConfig, AuthTokens};
use routecoach::feed::FeedEvent;
use routecoach::service::{EditsRequest, StepRequest};
use routecoach_core::design::{NegotiationAction, RouteEdit};
use routecoach_core::engine::TrainingEvent;
use routecoach_core::route::{Instruction, PoiKind};
use serde_json::{json, Value};
use support::*;

fn fix_json(p: routecoach_core::geo::GeoPoint, ts: i64) -> Value {
    json!({ "lat": p.lat, "lon": p.lon, "ts_ms": ts })
}

/// Walk, curation and negotiation over HTTP; returns the working route id.
async fn working_route_over_http(app: &axum::Router) -> String {
    let (s, _) = call(app, Method::POST, "/ways", Some(serde_json::to_value(way("hw")).unwrap())).await;
    assert_eq!(s, 201);
    let (s, erw) = call(app, Method::POST, "/erw/hw/start", Some(json!({ "ts_ms": T0 }))).await;
    assert_eq!(s, 201, "{erw}");
    let erw_id = erw["id"].as_str().unwrap().to_owned();
    for (i, p) in l_walk().iter().enumerate() {
        let ts = T0 + i as i64 * 4000;
        let (s, _) = call(app, Method::POST, "/erw/hw/fix", Some(fix_json(*p, ts))).await;
        assert_eq!(s, 200);
        if i == 80 {
            let mut body = fix_json(*p, ts);
            body["photos"] = serde_json::to_value(vec![photo("hw-corner")]).unwrap();
            body["note"] = json!("red door");
            let (s, v) = call(app, Method::POST, "/erw/hw/poi", Some(body)).await;
            assert_eq!(s, 201, "{v}");
        }
    }
    let (s, v) = call(app, Method::POST, &format!("/erw/{erw_id}/finish"), None).await;
    assert_eq!(s, 200, "{v}");
    let (s, draft) = call(app, Method::POST, "/routes", Some(json!({ "erw_id": erw_id, "route_id": "hw-route" }))).await;
    assert_eq!(s, 201, "{draft}");

    let poi = draft["pois"][0]["id"].as_str().unwrap().to_owned();
    let edits = EditsRequest {
        base_version: draft["version"].as_u64().unwrap() as u32,
        edits: vec![RouteEdit::PromoteCandidate {
            poi_id: poi.as_str().into(),
            kind: PoiKind::Landmark,
            instruction: Some(Instruction::text("Turn right at the red door.")),
        }],
    };
    let (s, v) = call(app, Method::POST, "/routes/hw-route/edits", Some(serde_json::to_value(edits).unwrap())).await;
    assert_eq!(s, 200, "{v}");

    let (s, v) = call(app, Method::POST, "/negotiations/hw-route", None).await;
    assert_eq!(s, 201, "{v}");
    for action in [
        NegotiationAction::SelectPhoto("hw-corner".into()),
        NegotiationAction::ApproveInstruction,
        NegotiationAction::Confirm,
    ] {
        let body = serde_json::to_value(StepRequest::action(action, T0)).unwrap();
        let (s, v) = call(app, Method::POST, "/negotiations/hw-route/step", Some(body)).await;
        assert_eq!(s, 200, "{v}");
    }
    let (s, done) = call(app, Method::POST, "/negotiations/hw-route/finalize", None).await;
    assert_eq!(s, 200, "{done}");
    assert_eq!(done["route"]["status"], "working");
    assert_eq!(done["cloud"]["status"], "synced");
    "hw-route".into()
}

#[tokio::test]
async fn http_walk_to_session_with_ndjson_feed() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), AppConfig::default());
    let app = router(svc);
    let route = working_route_over_http(&app).await;

    let (s, consent) = call(
        &app,
        Method::POST,
        "/consents",
        Some(json!({ "user_id": "u1", "scope": "training-telemetry", "disclosure": "We share your position with your trainer.", "ts_ms": T0 + 1000 })),
    )
    .await;
    assert_eq!(s, 201, "{consent}");
    let (s, begun) = call(
        &app,
        Method::POST,
        "/sessions",
        Some(json!({
            "session_id": "hs1",
            "route_id": route,
            "supervision": "remote",
            "modalities": ["text", "symbol"],
            "consent_id": consent["consent_id"],
            "ts_ms": T0 + 2000,
        })),
    )
    .await;
    assert_eq!(s, 201, "{begun}");
    assert_eq!(begun["events"][0]["type"], "SessionStart");

    let t = T0 + 3000;
    let pts = l_walk();
    for (i, p) in pts.iter().take(100).enumerate() {
        let (s, _) = call(&app, Method::POST, "/sessions/hs1/fix", Some(fix_json(*p, t + i as i64 * 1000))).await;
        assert_eq!(s, 200);
    }
    let (s, help) = call(
        &app,
        Method::POST,
        "/sessions/hs1/help",
        Some(json!({ "reason": "not sure", "ts_ms": t + 100_000 })),
    )
    .await;
    assert_eq!(s, 200, "{help}");
    assert_eq!(help["events"][0]["type"], "HelpRequest");

    let (s, snap) = call(&app, Method::GET, "/sessions/hs1/snapshot", None).await;
    assert_eq!(s, 200);
    let last = pts[99];
    assert!((snap["position"]["lat"].as_f64().unwrap() - last.lat).abs() < 1e-12);

    // Indicators are refused while the session is live.
    let (s, v) = call(&app, Method::GET, "/sessions/hs1/indicators", None).await;
    assert_eq!((s, v["error"].as_str()), (409, Some("session-active")));

    let (s, end) = call(&app, Method::POST, "/sessions/hs1/end", Some(json!({ "confidence": 3, "ts_ms": t + 110_000 }))).await;
    assert_eq!(s, 200, "{end}");

    let (s, body) = call_raw(&app, Method::GET, "/sessions/hs1/feed?from_seq=1", None).await;
    assert_eq!(s, 200);
    let text = String::from_utf8(body).unwrap();
    let feed: Vec<FeedEvent> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let seqs: Vec<u64> = feed.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (1..=feed.len() as u64).collect::<Vec<_>>());
    assert!(feed.iter().any(|e| e.event.kind.name() == "HelpRequest"));
    assert!(feed.iter().any(|e| e.event.kind.name() == "Instruction"));
    assert_eq!(feed.last().unwrap().event.kind.name(), "SessionEnd");

    let logged: Vec<TrainingEvent> = serde_json::from_value(end["record"]["events"].clone()).unwrap();
    assert_eq!(feed.iter().map(|e| e.event.clone()).collect::<Vec<_>>(), logged);

    let (s, tail) = call(&app, Method::GET, "/sessions/hs1/events?from_seq=5", None).await;
    assert_eq!(s, 200);
    let tail: Vec<FeedEvent> = serde_json::from_value(tail).unwrap();
    assert_eq!(tail, feed[4..].to_vec());

    let (s, report) = call(&app, Method::GET, "/sessions/hs1/indicators", None).await;
    assert_eq!(s, 200, "{report}");
    assert_eq!(report["counters"]["U"], 0);
}

#[tokio::test]
async fn bearer_tokens_gate_trainer_operations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AppConfig {
        auth: Some(AuthTokens {
            trainer_token: "t-secret".into(),
            user_token: "u-secret".into(),
        }),
        ..AppConfig::default()
    };
    let app = router(service(dir.path(), cfg));
    let body = serde_json::to_value(way("aw")).unwrap();
    let (s, _) = call_as(&app, None, Method::POST, "/ways", Some(body.clone())).await;
    assert_eq!(s, 401);
    let (s, _) = call_as(&app, Some("wrong"), Method::POST, "/ways", Some(body.clone())).await;
    assert_eq!(s, 401);
    let (s, v) = call_as(&app, Some("u-secret"), Method::POST, "/ways", Some(body.clone())).await;
    assert_eq!(s, 403);
    assert_eq!(serde_json::from_slice::<Value>(&v).unwrap()["error"], "trainer-only");
    let (s, _) = call_as(&app, Some("t-secret"), Method::POST, "/ways", Some(body)).await;
    assert_eq!(s, 201);
    // Reading a way is open to the trainee.
    let (s, _) = call_as(&app, Some("u-secret"), Method::GET, "/ways/aw", None).await;
    assert_eq!(s, 200);
}

#[tokio::test]
async fn errors_carry_status_and_code() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), AppConfig::default());
    let route = working_route(&svc, "ew");
    let app = router(svc);

    let (s, v) = call(&app, Method::GET, "/routes/nope", None).await;
    assert_eq!((s, v["error"].as_str()), (404, Some("not-found")));

    let stale = json!({ "base_version": route.version() - 1, "edits": [] });
    let (s, v) = call(&app, Method::POST, "/routes/ew-route/edits", Some(stale)).await;
    assert_eq!((s, v["error"].as_str()), (409, Some("conflict")));

    let poi = route.pois()[1].id.as_str();
    let (s, card) = call(&app, Method::GET, &format!("/routes/ew-route/pois/{poi}/preview?modalities=text,symbol"), None).await;
    assert_eq!(s, 200, "{card}");
    assert_eq!(card["preview_only"], false);
    let (s, v) = call(&app, Method::GET, &format!("/routes/ew-route/pois/{poi}/preview?modalities=smell"), None).await;
    assert_eq!((s, v["error"].as_str()), (422, Some("bad-modality")));

    let begin = json!({ "route_id": "ew-route", "supervision": "app_only", "modalities": ["text"], "ts_ms": T0 });
    let (s, v) = call(&app, Method::POST, "/sessions", Some(begin)).await;
    assert_eq!((s, v["error"].as_str()), (403, Some("consent-required")));

    let (s, v) = call(&app, Method::POST, "/sessions/ghost/fix", Some(fix_json(ORIGIN, T0))).await;
    assert_eq!((s, v["error"].as_str()), (404, Some("not-found")));
}
