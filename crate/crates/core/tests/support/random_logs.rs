//! Random but well-formed session logs and a naive indicator counter used as
//! an independent oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use routecoach_core::engine::{
    AssistSource, EpisodeEnd, EventKind, SessionRecord, Supervision, TrainingConfig, TrainingEvent, UnexpectedKind,
};
use routecoach_core::ids::PoiId;
use routecoach_core::payload::Modality;
use routecoach_core::route::{PoiKind, SubPath, SupportMode};

pub fn random_log(seed: u64) -> SessionRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: f64 = rng.random_range(300.0..3000.0);
    let mut cuts: Vec<f64> = (0..rng.random_range(0..4)).map(|_| rng.random_range(1.0..len - 1.0)).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut bounds = vec![0.0];
    bounds.extend(cuts);
    bounds.push(len);
    let subpaths: Vec<SubPath> = bounds.windows(2).map(|w| SubPath::new(w[0], w[1], SupportMode::Actionable)).collect();

    let pois: Vec<(PoiId, PoiKind)> = (0..6)
        .map(|i| {
            let kind = if rng.random_bool(0.6) { PoiKind::Landmark } else { PoiKind::Reassurance };
            (PoiId::new(format!("p{i}")), kind)
        })
        .collect();

    let mut kinds = Vec::new();
    let mut open: Option<f64> = None;
    let n = rng.random_range(0..40);
    for _ in 0..n {
        // boundaries are the interesting places for attribution
        let along = if rng.random_bool(0.1) {
            bounds[rng.random_range(0..bounds.len())]
        } else {
            rng.random_range(0.0..=len)
        };
        let (poi, poi_kind) = pois[rng.random_range(0..pois.len())].clone();
        let maybe_poi = |rng: &mut ChaCha8Rng| rng.random_bool(0.5).then(|| pois[rng.random_range(0..pois.len())].0.clone());
        let k = match rng.random_range(0..13) {
            0 | 1 => EventKind::VicinityAlert { along_m: along, poi_id: poi, poi_kind, mode: SupportMode::Actionable },
            2 => EventKind::Instruction {
                along_m: along,
                poi_id: poi.clone(),
                fallback: rng.random_bool(0.5),
                content: routecoach_core::payload::InstructionPayload {
                    poi_id: poi,
                    poi_kind,
                    photo: None,
                    text: None,
                    symbol: None,
                    audio: None,
                    tactile: false,
                    ar_overlay: false,
                },
            },
            3 => {
                let answered = rng.random_bool(0.8);
                EventKind::QuizAnswer {
                    along_m: along,
                    quiz_id: "q".into(),
                    poi_id: poi,
                    correct: answered && rng.random_bool(0.5),
                    answered,
                    choice: None,
                }
            }
            4 => EventKind::MistakeAlert { along_m: along, poi_id: poi },
            5 => EventKind::Reward { along_m: along, poi_id: poi },
            6 => match open {
                None => {
                    open = Some(along);
                    EventKind::OffTrackBegin { along_m: along, cross_track_m: 35.0, attributed_poi: maybe_poi(&mut rng) }
                }
                Some(begin) => {
                    open = None;
                    let resolution = if rng.random_bool(0.6) { EpisodeEnd::SelfRecovered } else { EpisodeEnd::Assisted };
                    EventKind::OffTrackEnd { along_m: begin, resolution }
                }
            },
            7 => EventKind::AssistLogged {
                along_m: along,
                source: AssistSource::InPersonTrainer,
                note: None,
                attributed_poi: maybe_poi(&mut rng),
            },
            8 => EventKind::ArActivated { along_m: along, poi_id: None },
            9 => EventKind::UnexpectedReport { along_m: along, kind: UnexpectedKind::Other, note: None },
            10 => EventKind::HelpRequest { along_m: along, reason: None },
            11 => EventKind::SignalLost { along_m: along, last_fix_ts_ms: 0 },
            _ => EventKind::RecoveryPrompt { along_m: along, options: Vec::new(), guidance: None },
        };
        kinds.push(k);
    }
    let mut ended_off_track = false;
    if let Some(begin) = open {
        if rng.random_bool(0.5) {
            ended_off_track = true;
        } else {
            kinds.push(EventKind::OffTrackEnd { along_m: begin, resolution: EpisodeEnd::SelfRecovered });
        }
    }
    let confidence = rng.random_bool(0.5).then(|| rng.random_range(1..=5));
    kinds.push(EventKind::SessionEnd { along_m: len, confidence, ended_off_track, unanswered_quiz: false });

    let events = kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| TrainingEvent { ts_ms: 1000 * i as i64, session_id: "rand".into(), seq: i as u64 + 1, kind })
        .collect();
    SessionRecord::from_log(
        "rand".into(),
        "route".into(),
        1,
        "way".into(),
        len,
        subpaths,
        TrainingConfig::new(Supervision::InPerson, [Modality::Text]),
        events,
    )
}

/// `[D, C, A, O, Rs, U, entries]`
pub type Naive = [u32; 7];

fn mistaken(events: &[TrainingEvent], poi: &PoiId) -> bool {
    events.iter().any(|e| match &e.kind {
        EventKind::OffTrackBegin { attributed_poi, .. } | EventKind::AssistLogged { attributed_poi, .. } => {
            attributed_poi.as_ref() == Some(poi)
        }
        EventKind::QuizAnswer { poi_id, answered, correct, .. } => poi_id == poi && *answered && !*correct,
        EventKind::MistakeAlert { poi_id, .. } => poi_id == poi,
        _ => false,
    })
}

fn naive_over(events: &[TrainingEvent], keep: impl Fn(&TrainingEvent) -> bool) -> Naive {
    let mut n = [0u32; 7];
    for e in events.iter().filter(|e| keep(e)) {
        match &e.kind {
            EventKind::VicinityAlert { poi_id, poi_kind, .. } => {
                n[6] += 1;
                if *poi_kind == PoiKind::Landmark {
                    n[0] += 1;
                    if !mistaken(events, poi_id) {
                        n[1] += 1;
                    }
                }
            }
            EventKind::AssistLogged { .. } | EventKind::ArActivated { .. } => n[2] += 1,
            EventKind::Instruction { fallback, .. } if *fallback => n[2] += 1,
            EventKind::OffTrackBegin { .. } => n[3] += 1,
            EventKind::OffTrackEnd { resolution: EpisodeEnd::SelfRecovered, .. } => n[4] += 1,
            EventKind::UnexpectedReport { .. } => n[5] += 1,
            _ => {}
        }
    }
    n
}

pub fn naive_session(record: &SessionRecord) -> Naive {
    naive_over(record.events(), |_| true)
}

/// Sub-path `i` owns `[start, end)`; the last one also owns the route end.
pub fn naive_subpaths(record: &SessionRecord) -> Vec<Naive> {
    let sps = record.subpaths();
    let owner = |along: f64| {
        (0..sps.len())
            .find(|&i| along < sps[i].end_m)
            .unwrap_or(sps.len() - 1)
    };
    (0..sps.len())
        .map(|i| naive_over(record.events(), |e| owner(e.kind.along_m()) == i))
        .collect()
}

/// accuracy, autonomy, error rate, recovery from naive counts.
pub fn naive_ratios(n: &Naive, len_km: f64) -> (Option<f64>, f64, f64, Option<f64>) {
    let [d, c, a, o, rs, u, entries] = n.map(f64::from);
    let accuracy = if d == 0.0 { None } else { Some(c / d) };
    let autonomy = 1.0 - f64::min(1.0, a / entries.max(1.0));
    let error = (d - c + o + u) / len_km;
    let recovery = if o == 0.0 { None } else { Some(rs / o) };
    (accuracy, autonomy, error, recovery)
}
