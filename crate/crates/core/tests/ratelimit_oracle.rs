use ema_core::ratelimit::{Decision, SlidingWindow, WINDOW_MS};
use ema_core::Timestamp;
use ema_testkit::{rng, sliding_window_oracle};
use rand::Rng;

fn decisions(limit: u32, requests: &[i64]) -> Vec<bool> {
    let mut w = SlidingWindow::new(limit);
    requests
        .iter()
        .map(|&t| w.check(Timestamp::from_millis(t)) == Decision::Allow)
        .collect()
}

#[test]
fn matches_brute_force_window_count_on_10000_sequences() {
    let mut r = rng(10_000);
    for case in 0..10_000 {
        let limit = r.random_range(1..8);
        let len = r.random_range(0..40);
        let spread = [10 * 60_000, WINDOW_MS, 4 * WINDOW_MS][case % 3];
        let mut t = 0i64;
        let requests: Vec<i64> = (0..len)
            .map(|_| {
                // Mostly forward, occasionally a late-stamped request.
                if r.random_bool(0.9) {
                    t += r.random_range(0..spread / 8 + 1);
                    t
                } else {
                    t - r.random_range(0..spread)
                }
            })
            .collect();
        assert_eq!(
            decisions(limit, &requests),
            sliding_window_oracle(&requests, limit, WINDOW_MS),
            "case {case}: limit {limit} {requests:?}"
        );
    }
}

#[test]
fn burst_admits_exactly_the_limit() {
    let t = 1_614_556_800_000;
    let admitted = decisions(60, &vec![t; 200]).into_iter().filter(|&a| a).count();
    assert_eq!(admitted, 60);
}

#[test]
fn every_hour_long_window_admits_at_most_the_limit() {
    let mut r = rng(5);
    let mut t = 0;
    let requests: Vec<i64> = (0..5_000)
        .map(|_| {
            t += r.random_range(0..120_000);
            t
        })
        .collect();
    let allowed: Vec<i64> = requests
        .iter()
        .zip(decisions(60, &requests))
        .filter_map(|(&t, ok)| ok.then_some(t))
        .collect();
    for (i, &start) in allowed.iter().enumerate() {
        let within = allowed[i..].iter().take_while(|&&a| a < start + WINDOW_MS).count();
        assert!(within <= 60);
    }
}
