use proptest::prelude::*;
use routecoach_core::design::{start_negotiation, NegotiationAction, RouteEdit};
use routecoach_core::geo::{destination_point, GeoPoint, Polyline};
use routecoach_core::route::{validate_route, Instruction, Poi, PoiKind, PoiStatus, RouteDefinition, RouteStatus};

fn draft() -> RouteDefinition {
    let a = GeoPoint { lat: 47.0, lon: 9.0 };
    let b = destination_point(a, 30.0, 400.0);
    let c = destination_point(b, 110.0, 400.0);
    let line = Polyline::new(vec![a, b, c]).unwrap();
    let pois = vec![
        Poi::new("r0", line.point_at(150.0), 0, PoiKind::Reassurance).with_photos(["r0-a", "r0-b"]),
        Poi::new("l0", b, 0, PoiKind::Landmark)
            .with_photos(["l0-a", "l0-b"])
            .with_instruction(Instruction::text("turn at the fountain")),
        Poi::new("c0", line.point_at(550.0), 0, PoiKind::Candidate).with_photos(["c0-a"]),
        Poi::new("l1", line.point_at(700.0), 0, PoiKind::Landmark)
            .with_photos(["l1-a"])
            .with_instruction(Instruction::text("cross at the lights")),
    ];
    RouteDefinition::draft("neg-route", "neg-way", line, pois)
}

#[derive(Debug, Clone)]
enum Step {
    Act(NegotiationAction),
    PromoteCurrent(PoiKind),
    Finalize,
}

fn step() -> impl Strategy<Value = Step> {
    let photo = prop::sample::select(vec!["r0-a", "r0-b", "l0-a", "l0-b", "c0-a", "l1-a", "nope"]);
    prop_oneof![
        3 => Just(Step::Act(NegotiationAction::Next)),
        2 => Just(Step::Act(NegotiationAction::Prev)),
        3 => Just(Step::Act(NegotiationAction::Confirm)),
        1 => Just(Step::Act(NegotiationAction::Reject)),
        3 => photo.clone().prop_map(|p| Step::Act(NegotiationAction::SelectPhoto(p.into()))),
        2 => Just(Step::Act(NegotiationAction::ApproveInstruction)),
        1 => photo.prop_map(|p| Step::Act(NegotiationAction::FlagPhoto(p.into()))),
        1 => Just(Step::Act(NegotiationAction::Annotate("looks fine".into()))),
        1 => prop::sample::select(vec![PoiKind::Landmark, PoiKind::Reassurance]).prop_map(Step::PromoteCurrent),
        1 => Just(Step::Finalize),
    ]
}

fn assert_working_invariants(route: &RouteDefinition) {
    assert_eq!(route.status(), RouteStatus::Working);
    assert!(validate_route(route).is_valid());
    assert!(route.pois().iter().all(|p| p.status == PoiStatus::Confirmed));
    assert!(route.pois().iter().all(|p| p.kind != PoiKind::Candidate));
    assert!(route.pois().iter().any(|p| p.is_decision_point()));
    assert!(route.pois().iter().all(|p| !p.photos.is_empty()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn random_sequences_never_yield_a_bad_working_route(steps in prop::collection::vec(step(), 0..80)) {
        let mut neg = start_negotiation("n", &draft()).unwrap();
        for s in steps {
            let before = neg.clone();
            let ok = match s {
                Step::Act(a) => neg.step(a, 0).is_ok(),
                Step::PromoteCurrent(kind) => {
                    let poi = neg.current_poi().id.clone();
                    let instruction = (kind == PoiKind::Landmark).then(|| Instruction::text("go past it"));
                    neg.edit(&RouteEdit::PromoteCandidate { poi_id: poi, kind, instruction }, 0).is_ok()
                }
                Step::Finalize => match neg.finalize() {
                    Ok(route) => {
                        assert_working_invariants(&route);
                        break;
                    }
                    Err(_) => false,
                },
            };
            if !ok {
                // failed operations leave no trace
                prop_assert_eq!(&neg, &before);
            }
        }
    }
}
