mod support;

use routecoach_core::indicators::{compute_indicators, subpath_breakdown, total_counters, Counters};
use support::random_logs::{naive_ratios, naive_session, naive_subpaths, random_log, Naive};

fn as_naive(c: &Counters) -> Naive {
    [c.decision_points, c.correct, c.assists, c.off_track, c.self_recoveries, c.user_reports, c.entries]
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        _ => false,
    }
}

#[test]
fn counters_and_ratios_match_the_naive_counter() {
    for seed in 0..300 {
        let rec = random_log(seed);
        let set = compute_indicators(&rec).unwrap();
        let naive = naive_session(&rec);
        assert_eq!(as_naive(&set.counters), naive, "seed {seed}");
        let (acc, aut, err, rec_) = naive_ratios(&naive, rec.route_length_m() / 1000.0);
        assert!(close(set.accuracy, acc), "seed {seed}");
        assert!((set.autonomy - aut).abs() <= 1e-9);
        assert!((set.error_rate_per_km - err).abs() <= 1e-9);
        assert!(close(set.recovery, rec_));

        let rows = subpath_breakdown(&rec).unwrap();
        let naive_rows = naive_subpaths(&rec);
        for (row, n) in rows.iter().zip(&naive_rows) {
            assert_eq!(as_naive(&row.indicators.counters), *n, "seed {seed} sub-path {}", row.index);
        }
        assert_eq!(as_naive(&total_counters(&rows)), naive, "conservation, seed {seed}");
    }
}
