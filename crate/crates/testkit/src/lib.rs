//! Generators and deliberately naive reference implementations used as
//! oracles by the test suites. Nothing here shares code paths with the
//! implementations it checks.

use std::collections::{BTreeMap, BTreeSet};

use ema_core::fusion::{MatchStatus, SensorReading};
use ema_core::payload::{Physiological, ResponsePayload};
use ema_core::survey::{Next, Question, Survey, SurveyDefinition};
use ema_core::time::Timestamp;
use rand::seq::SliceRandom;
use rand::Rng;

pub use rand_chacha::ChaCha8Rng;
pub use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn question(identifier: String, options: usize, next: Vec<Next>) -> Question {
    Question {
        title: format!("Question {identifier}?"),
        options: (0..options).map(|o| format!("Option {o}")).collect(),
        icons: (0..options).map(|o| format!("icon-{o}")).collect(),
        next_question: next,
        identifier,
    }
}

/// A random valid (acyclic, fully reachable) definition with 1..=`max_questions` questions.
pub fn random_valid_definition(rng: &mut impl Rng, max_questions: usize) -> SurveyDefinition {
    let n = rng.random_range(1..=max_questions);
    // Work in topological positions, then relabel positions 1..n randomly.
    let mut slots: Vec<Vec<Option<usize>>> =
        (0..n).map(|_| vec![None; rng.random_range(2..=4)]).collect();
    for q in 1..n {
        let with_free: Vec<usize> = (0..q).filter(|&p| slots[p].contains(&None)).collect();
        let parent = match with_free.as_slice() {
            [] => {
                let p = rng.random_range(0..q);
                slots[p].push(None);
                p
            }
            free => free[rng.random_range(0..free.len())],
        };
        let empty: Vec<usize> = (0..slots[parent].len())
            .filter(|&o| slots[parent][o].is_none())
            .collect();
        let o = empty[rng.random_range(0..empty.len())];
        slots[parent][o] = Some(q);
    }
    for (q, options) in slots.iter_mut().enumerate() {
        for slot in options.iter_mut().filter(|s| s.is_none()) {
            let target = rng.random_range(q + 1..=n);
            // `n` stands for END here.
            *slot = Some(target);
        }
    }

    let mut relabel: Vec<usize> = (1..n).collect();
    relabel.shuffle(rng);
    let label = |pos: usize| if pos == 0 { 0 } else { relabel[pos - 1] };
    let mut questions: Vec<Option<Question>> = vec![None; n];
    for (pos, options) in slots.iter().enumerate() {
        let next = options
            .iter()
            .map(|t| match t.unwrap() {
                t if t == n => Next::End,
                t => Next::Question(label(t)),
            })
            .collect::<Vec<_>>();
        questions[label(pos)] = Some(question(format!("q-{pos}"), next.len(), next));
    }
    SurveyDefinition {
        survey_id: format!("random-{n}"),
        version: 1,
        questions: questions.into_iter().map(Option::unwrap).collect(),
    }
}

/// A random, usually invalid, graph: targets may be END, any index
/// (including self and earlier questions), or out of range.
pub fn random_graph(rng: &mut impl Rng, max_questions: usize) -> SurveyDefinition {
    let n = rng.random_range(1..=max_questions);
    let questions = (0..n)
        .map(|q| {
            let k = rng.random_range(2..=4);
            let next = (0..k)
                .map(|_| match rng.random_range(0..10) {
                    0..=2 => Next::End,
                    3 => Next::Question(n + rng.random_range(0..3)),
                    _ => Next::Question(rng.random_range(0..n)),
                })
                .collect();
            question(format!("g-{q}"), k, next)
        })
        .collect();
    SurveyDefinition {
        survey_id: "graph".into(),
        version: 1,
        questions,
    }
}

/// Reachable set by naive fixpoint iteration.
pub fn reachable_oracle(def: &SurveyDefinition) -> BTreeSet<usize> {
    let n = def.questions.len();
    let mut reach = BTreeSet::new();
    if n == 0 {
        return reach;
    }
    reach.insert(0);
    loop {
        let before = reach.len();
        for q in reach.clone() {
            for t in &def.questions[q].next_question {
                if let Next::Question(t) = *t {
                    if t < n {
                        reach.insert(t);
                    }
                }
            }
        }
        if reach.len() == before {
            return reach;
        }
    }
}

/// Path count by explicit recursion over every branch.
pub fn count_paths_oracle(def: &SurveyDefinition) -> u64 {
    fn walk(def: &SurveyDefinition, q: usize) -> u64 {
        def.questions[q]
            .next_question
            .iter()
            .map(|t| match t {
                Next::End => 1,
                Next::Question(t) => walk(def, *t),
            })
            .sum()
    }
    walk(def, 0)
}

/// Uniformly random walk from q0 to END; returns the option indices chosen.
pub fn random_path(rng: &mut impl Rng, survey: &Survey) -> Vec<usize> {
    let mut path = Vec::new();
    let mut at = Next::Question(0);
    while let Next::Question(q) = at {
        let question = survey.question(q).unwrap();
        let o = rng.random_range(0..question.options.len());
        path.push(o);
        at = question.next_question[o];
    }
    path
}

/// Whole-millisecond timestamp in March 2021.
pub fn random_instant(rng: &mut impl Rng) -> Timestamp {
    let base = 1_614_556_800_000; // 2021-03-01T00:00:00Z
    Timestamp::from_millis(base + rng.random_range(0..30 * 86_400_000))
}

fn maybe<T>(rng: &mut impl Rng, f: impl FnOnce(&mut dyn rand::RngCore) -> T) -> Option<T> {
    if rng.random_bool(0.7) {
        let mut inner = ChaCha8Rng::seed_from_u64(rng.random());
        Some(f(&mut inner))
    } else {
        None
    }
}

pub fn random_physiological(rng: &mut impl Rng) -> Physiological {
    let coords = rng.random_bool(0.6);
    Physiological {
        heart_rate: maybe(rng, |r| r.random_range(35.0..200.0)),
        step_count: maybe(rng, |r| r.random_range(0..40_000)),
        latitude: coords.then(|| rng.random_range(-90.0..=90.0)),
        longitude: coords.then(|| rng.random_range(-180.0..=180.0)),
        weight: maybe(rng, |r| r.random_range(30.0..200.0)),
        height: maybe(rng, |r| r.random_range(1.2..2.2)),
        basal_energy: maybe(rng, |r| r.random_range(800.0..2500.0)),
    }
}

/// A payload that satisfies every invariant against `survey`.
pub fn random_valid_payload(
    rng: &mut impl Rng,
    survey: &Survey,
    participant_id: &str,
) -> ResponsePayload {
    let path = random_path(rng, survey);
    let started_at = random_instant(rng);
    let submitted_at = started_at.plus_millis(rng.random_range(0..60_000));
    ResponsePayload {
        participant_id: participant_id.into(),
        survey_id: survey.survey_id().into(),
        survey_version: survey.version(),
        started_at,
        submitted_at,
        answers: survey.answers_for_path(&path).unwrap(),
        physiological: rng.random_bool(0.8).then(|| random_physiological(rng)),
        device_info: rng
            .random_bool(0.5)
            .then(|| format!("Watch{},{}", rng.random_range(3..9), rng.random_range(1..5))),
    }
}

/// Breaks exactly one invariant of a valid payload. Returns the mutation name.
pub fn corrupt_payload(rng: &mut impl Rng, payload: &mut ResponsePayload, survey: &Survey) -> &'static str {
    let entry = &survey.questions()[0].identifier;
    let phys = payload.physiological.get_or_insert_with(Default::default);
    match rng.random_range(0..10) {
        0 => {
            payload.answers.remove(entry);
            "missing entry answer"
        }
        1 => {
            payload.answers.insert(entry.clone(), "Not an option".into());
            "unknown option"
        }
        2 => {
            payload.answers.insert("no-such-question".into(), "x".into());
            "unknown identifier"
        }
        3 => {
            phys.heart_rate = Some(rng.random_range(300.0..1000.0));
            "heart rate"
        }
        4 => {
            phys.latitude = Some(rng.random_range(90.001..400.0));
            phys.longitude = Some(0.0);
            "latitude"
        }
        5 => {
            payload.submitted_at = payload.started_at.plus_millis(-rng.random_range(1..100_000));
            "time order"
        }
        6 => {
            phys.latitude = Some(1.0);
            phys.longitude = None;
            "half coordinates"
        }
        7 => {
            phys.weight = Some(-rng.random_range(0.0..80.0));
            "weight"
        }
        8 => {
            phys.height = Some(rng.random_range(3.0..10.0));
            "height"
        }
        _ => {
            payload.participant_id = String::new();
            "empty participant"
        }
    }
}

pub fn random_reading(rng: &mut impl Rng, locations: &[&str], loggers: usize) -> SensorReading {
    let location = locations[rng.random_range(0..locations.len())];
    SensorReading {
        logger_id: format!("L{}", rng.random_range(0..loggers)),
        location_label: location.into(),
        timestamp: random_instant(rng),
        dry_bulb_temp_c: (rng.random_range(150..350) as f64) / 10.0,
        relative_humidity_pct: (rng.random_range(200..900) as f64) / 10.0,
    }
}

/// Exhaustive nearest-reading scan. Returns, per response, the status, the
/// index of the chosen reading and its signed delta in milliseconds.
pub fn nearest_scan_oracle(
    responses: &[ResponsePayload],
    readings: &[SensorReading],
    window_ms: i64,
    location_key: &str,
    indoor_key: Option<(&str, &str)>,
) -> Vec<(MatchStatus, Option<(usize, i64)>)> {
    responses
        .iter()
        .map(|resp| {
            if let Some((key, indoor)) = indoor_key {
                if resp.answers.get(key).is_some_and(|a| a != indoor) {
                    return (MatchStatus::NoLoggerForLocation, None);
                }
            }
            let Some(location) = resp.answers.get(location_key) else {
                return (MatchStatus::NoLoggerForLocation, None);
            };
            let mut best: Option<(i64, Timestamp, &str, usize)> = None;
            for (i, r) in readings.iter().enumerate() {
                if &r.location_label != location {
                    continue;
                }
                let delta = r.timestamp.as_millis() - resp.submitted_at.as_millis();
                let key = (delta.abs(), r.timestamp, r.logger_id.as_str(), i);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
            match best {
                None => (MatchStatus::NoLoggerForLocation, None),
                Some((dist, _, _, i)) if dist <= window_ms => {
                    let delta = readings[i].timestamp.as_millis() - resp.submitted_at.as_millis();
                    (MatchStatus::Matched, Some((i, delta)))
                }
                Some(_) => (MatchStatus::NoReadingInWindow, None),
            }
        })
        .collect()
}

/// Brute-force sliding window: request i is allowed iff fewer than `limit`
/// earlier allowed requests lie in `(now_i - window, now_i]`, where `now_i`
/// is the running maximum of the submitted timestamps.
pub fn sliding_window_oracle(requests: &[i64], limit: u32, window_ms: i64) -> Vec<bool> {
    let mut allowed_at: Vec<i64> = Vec::new();
    let mut out = Vec::with_capacity(requests.len());
    let mut clock = i64::MIN;
    for &t in requests {
        clock = clock.max(t);
        let in_window = allowed_at
            .iter()
            .filter(|&&a| a > clock - window_ms && a <= clock)
            .count();
        let ok = in_window < limit as usize;
        if ok {
            allowed_at.push(clock);
        }
        out.push(ok);
    }
    out
}

/// Scripted day for the condition-based rule replay.
#[derive(Debug, Clone)]
pub struct ConditionalScenario {
    pub start: Timestamp,
    pub step_ms: i64,
    pub steps: usize,
    /// (time, location, temperature)
    pub readings: Vec<(Timestamp, String, f64)>,
    /// (time, participant, location)
    pub reports: Vec<(Timestamp, String, String)>,
}

pub fn random_conditional_scenario(rng: &mut impl Rng, participants: usize) -> ConditionalScenario {
    let start: Timestamp = "2021-03-01T00:00:00Z".parse().unwrap();
    let locations = ["Office", "Home", "Other"];
    let mut readings = Vec::new();
    for loc in locations {
        // A logger every 5 minutes with a random-walk temperature.
        let mut temp: f64 = rng.random_range(24.0..30.0);
        for k in 0..288 {
            temp = (temp + rng.random_range(-0.6..0.6)).clamp(18.0, 34.0);
            let jitter = rng.random_range(0..60_000);
            readings.push((start.plus_millis(k * 300_000 + jitter), loc.to_string(), (temp * 10.0).round() / 10.0));
        }
    }
    let mut reports = Vec::new();
    for p in 0..participants {
        for _ in 0..rng.random_range(5..25) {
            let at = start.plus_millis(rng.random_range(0..86_400_000));
            reports.push((at, format!("P{p}"), locations[rng.random_range(0..3)].to_string()));
        }
    }
    ConditionalScenario {
        start,
        step_ms: 60_000,
        steps: 24 * 60,
        readings,
        reports,
    }
}

/// Step-by-step replay of a threshold rule with full rescans at every tick.
/// Returns the (tick time, participant) pairs that must fire.
pub fn conditional_reference(
    scenario: &ConditionalScenario,
    location: &str,
    threshold: f64,
    above: bool,
    cooldown_ms: i64,
    presence_ttl_ms: i64,
) -> Vec<(Timestamp, String)> {
    let mut last_fired: BTreeMap<String, Timestamp> = BTreeMap::new();
    let mut fired = Vec::new();
    for k in 0..scenario.steps {
        let now = scenario.start.plus_millis(k as i64 * scenario.step_ms);
        let latest = scenario
            .readings
            .iter()
            .filter(|(t, loc, _)| *t <= now && loc == location)
            .max_by_key(|(t, _, _)| *t);
        let Some((_, _, temp)) = latest else { continue };
        let hot = if above { *temp > threshold } else { *temp < threshold };
        if !hot {
            continue;
        }
        let mut here: BTreeMap<&str, (Timestamp, &str)> = BTreeMap::new();
        for (t, p, loc) in &scenario.reports {
            if *t <= now && here.get(p.as_str()).is_none_or(|(seen, _)| t >= seen) {
                here.insert(p, (*t, loc));
            }
        }
        for (p, (t, loc)) in here {
            if loc != location || now.as_millis() - t.as_millis() > presence_ttl_ms {
                continue;
            }
            if last_fired
                .get(p)
                .is_some_and(|l| now.as_millis() - l.as_millis() < cooldown_ms)
            {
                continue;
            }
            last_fired.insert(p.to_string(), now);
            fired.push((now, p.to_string()));
        }
    }
    fired
}
