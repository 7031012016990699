//! Joining survey responses with environmental logger readings.
//!
//! A response is matched to the reading taken at the location it reports
//! (the spatial key) that is closest in time to its submission (the temporal
//! key), provided the gap is within the configured window. Equidistant
//! readings resolve toward the earlier one.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::payload::ResponsePayload;
use crate::survey::Survey;
use crate::time::Timestamp;

pub const DEFAULT_WINDOW_SECONDS: u32 = 15 * 60;
pub const DEFAULT_LOCATION_KEY: &str = "location-place";
pub const DEFAULT_INDOOR_KEY: &str = "indoor-outdoor";
pub const DEFAULT_INDOOR_OPTION: &str = "Indoor";
pub const DEFAULT_PREFERENCE_KEY: &str = "tc-preference";

/// One environmental logger record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SensorReading {
    pub logger_id: String,
    pub location_label: String,
    pub timestamp: Timestamp,
    pub dry_bulb_temp_c: f64,
    pub relative_humidity_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum ReadingViolation {
    #[error("empty logger id")]
    EmptyLoggerId,
    #[error("empty location label")]
    EmptyLocation,
    #[error("temperature outside [-40, 60] °C")]
    TemperatureOutOfRange,
    #[error("relative humidity outside [0, 100] %")]
    HumidityOutOfRange,
}

impl SensorReading {
    pub fn validate(&self) -> Result<(), ReadingViolation> {
        if self.logger_id.trim().is_empty() {
            return Err(ReadingViolation::EmptyLoggerId);
        }
        if self.location_label.trim().is_empty() {
            return Err(ReadingViolation::EmptyLocation);
        }
        if !(-40.0..=60.0).contains(&self.dry_bulb_temp_c) {
            return Err(ReadingViolation::TemperatureOutOfRange);
        }
        if !(0.0..=100.0).contains(&self.relative_humidity_pct) {
            return Err(ReadingViolation::HumidityOutOfRange);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MatchStatus {
    Matched,
    NoLoggerForLocation,
    NoReadingInWindow,
}

impl MatchStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchStatus::Matched => "matched",
            MatchStatus::NoLoggerForLocation => "noLoggerForLocation",
            MatchStatus::NoReadingInWindow => "noReadingInWindow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            MatchStatus::Matched,
            MatchStatus::NoLoggerForLocation,
            MatchStatus::NoReadingInWindow,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match<'a> {
    pub reading: &'a SensorReading,
    /// Reading time minus submission time.
    pub delta_ms: i64,
}

impl Match<'_> {
    pub fn delta_seconds(&self) -> f64 {
        self.delta_ms as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedRecord<'a> {
    pub response: &'a ResponsePayload,
    pub matched: Option<Match<'a>>,
    pub status: MatchStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOptions {
    pub window_seconds: u32,
    /// Question whose answer must equal a reading's `location_label`.
    pub location_key: String,
    /// Indoor/outdoor question; when the survey has it, only responses
    /// answering `indoor_option` are eligible for a logger.
    pub indoor_key: Option<String>,
    pub indoor_option: String,
}

impl Default for MergeOptions {
    fn default() -> Self {
        MergeOptions {
            window_seconds: DEFAULT_WINDOW_SECONDS,
            location_key: DEFAULT_LOCATION_KEY.into(),
            indoor_key: Some(DEFAULT_INDOOR_KEY.into()),
            indoor_option: DEFAULT_INDOOR_OPTION.into(),
        }
    }
}

impl MergeOptions {
    pub fn with_window_minutes(mut self, minutes: u32) -> Self {
        self.window_seconds = minutes * 60;
        self
    }

    fn window_ms(&self) -> i64 {
        i64::from(self.window_seconds) * 1000
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FusionError {
    #[error("window must be positive")]
    InvalidWindow,
    #[error("location key {0:?} is not a question of the survey")]
    UnknownLocationKey(String),
    #[error("bin width must be positive and finite")]
    InvalidBinWidth,
}

/// Readings grouped by location, each group sorted by (timestamp, logger, input position).
struct ReadingIndex<'a> {
    by_location: BTreeMap<&'a str, Vec<&'a SensorReading>>,
}

impl<'a> ReadingIndex<'a> {
    fn new(readings: &'a [SensorReading]) -> Self {
        let mut by_location: BTreeMap<&str, Vec<(usize, &SensorReading)>> = BTreeMap::new();
        for (i, r) in readings.iter().enumerate() {
            by_location
                .entry(r.location_label.as_str())
                .or_default()
                .push((i, r));
        }
        let by_location = by_location
            .into_iter()
            .map(|(loc, mut group)| {
                group.sort_by(|(ia, a), (ib, b)| {
                    (a.timestamp, &a.logger_id, ia).cmp(&(b.timestamp, &b.logger_id, ib))
                });
                (loc, group.into_iter().map(|(_, r)| r).collect())
            })
            .collect();
        ReadingIndex { by_location }
    }

    fn nearest(&self, location: &str, at: Timestamp) -> Option<Option<Match<'a>>> {
        let group = self.by_location.get(location)?;
        let after = group.partition_point(|r| r.timestamp < at);
        let right = group.get(after).copied();
        let left = after.checked_sub(1).map(|last| {
            let ts = group[last].timestamp;
            group[group.partition_point(|r| r.timestamp < ts)]
        });
        let best = match (left, right) {
            (Some(l), Some(r)) => {
                if at.millis_since(l.timestamp) <= r.timestamp.millis_since(at) {
                    Some(l)
                } else {
                    Some(r)
                }
            }
            (l, r) => l.or(r),
        };
        Some(best.map(|reading| Match {
            reading,
            delta_ms: reading.timestamp.millis_since(at),
        }))
    }
}

/// Joins every response with its nearest same-location reading. Output order
/// equals input order.
pub fn merge_responses<'a>(
    survey: &Survey,
    responses: &'a [ResponsePayload],
    readings: &'a [SensorReading],
    options: &MergeOptions,
) -> Result<Vec<MergedRecord<'a>>, FusionError> {
    if options.window_seconds == 0 {
        return Err(FusionError::InvalidWindow);
    }
    if survey.index_of(&options.location_key).is_none() {
        return Err(FusionError::UnknownLocationKey(options.location_key.clone()));
    }
    let indoor_key = options
        .indoor_key
        .as_deref()
        .filter(|k| survey.index_of(k).is_some());
    let window = options.window_ms();
    let index = ReadingIndex::new(readings);

    Ok(responses
        .iter()
        .map(|response| {
            let outdoors = indoor_key
                .and_then(|k| response.answer(k))
                .is_some_and(|a| a != options.indoor_option);
            let nearest = response
                .answer(&options.location_key)
                .filter(|_| !outdoors)
                .and_then(|loc| index.nearest(loc, response.submitted_at));
            let (matched, status) = match nearest {
                None => (None, MatchStatus::NoLoggerForLocation),
                Some(Some(m)) if m.delta_ms.abs() <= window => (Some(m), MatchStatus::Matched),
                Some(_) => (None, MatchStatus::NoReadingInWindow),
            };
            MergedRecord {
                response,
                matched,
                status,
            }
        })
        .collect())
}

/// Minimal view of a merged row needed to tally preferences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileInput<'a> {
    pub participant_id: &'a str,
    pub preference: Option<&'a str>,
    /// Matched dry-bulb temperature, `None` when unmatched.
    pub temperature_c: Option<f64>,
}

impl<'a> MergedRecord<'a> {
    pub fn profile_input(&self, preference_key: &str) -> ProfileInput<'a> {
        ProfileInput {
            participant_id: &self.response.participant_id,
            preference: self.response.answer(preference_key),
            temperature_c: self.matched.map(|m| m.reading.dry_bulb_temp_c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct TemperatureBin {
    pub lower_c: f64,
    pub upper_c: f64,
    pub counts: BTreeMap<String, u32>,
}

impl TemperatureBin {
    pub fn total(&self) -> u32 {
        self.counts.values().sum()
    }

    pub fn fractions(&self) -> BTreeMap<String, f64> {
        let total = f64::from(self.total());
        self.counts
            .iter()
            .map(|(k, &v)| (k.clone(), f64::from(v) / total))
            .collect()
    }
}

/// Descriptive thermal-preference tallies for one participant.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PreferenceProfile {
    pub participant_id: String,
    pub bin_width_c: f64,
    pub total_responses: u32,
    pub overall: BTreeMap<String, u32>,
    /// Keyed by `floor(temperature / bin_width_c)`; bin k covers `[k·w, (k+1)·w)`.
    #[serde(serialize_with = "bins_as_list")]
    pub bins: BTreeMap<i64, TemperatureBin>,
}

fn bins_as_list<S: serde::Serializer>(
    bins: &BTreeMap<i64, TemperatureBin>,
    s: S,
) -> Result<S::Ok, S::Error> {
    s.collect_seq(bins.values())
}

pub fn bin_index(temperature_c: f64, bin_width_c: f64) -> i64 {
    libm::floor(temperature_c / bin_width_c) as i64
}

/// Builds one profile per participant, ordered by participant id. Unmatched
/// rows count toward the overall tallies only.
pub fn preference_profiles<'a, I>(
    inputs: I,
    bin_width_c: f64,
) -> Result<Vec<PreferenceProfile>, FusionError>
where
    I: IntoIterator<Item = ProfileInput<'a>>,
{
    if !(bin_width_c > 0.0 && bin_width_c.is_finite()) {
        return Err(FusionError::InvalidBinWidth);
    }
    let mut profiles: BTreeMap<&str, PreferenceProfile> = BTreeMap::new();
    for input in inputs {
        let profile = profiles
            .entry(input.participant_id)
            .or_insert_with(|| PreferenceProfile {
                participant_id: input.participant_id.into(),
                bin_width_c,
                total_responses: 0,
                overall: BTreeMap::new(),
                bins: BTreeMap::new(),
            });
        profile.total_responses += 1;
        let Some(pref) = input.preference else { continue };
        *profile.overall.entry(pref.into()).or_default() += 1;
        if let Some(t) = input.temperature_c {
            let k = bin_index(t, bin_width_c);
            let bin = profile.bins.entry(k).or_insert_with(|| TemperatureBin {
                lower_c: k as f64 * bin_width_c,
                upper_c: (k + 1) as f64 * bin_width_c,
                counts: BTreeMap::new(),
            });
            *bin.counts.entry(pref.into()).or_default() += 1;
        }
    }
    Ok(profiles.into_values().collect())
}

/// Latest reading per location at or before `now`.
pub fn latest_by_location<'a, I>(readings: I, now: Timestamp) -> BTreeMap<String, SensorReading>
where
    I: IntoIterator<Item = &'a SensorReading>,
{
    let mut latest: BTreeMap<String, SensorReading> = BTreeMap::new();
    for r in readings.into_iter().filter(|r| r.timestamp <= now) {
        match latest.get(&r.location_label) {
            Some(cur) if cur.timestamp >= r.timestamp => {}
            _ => {
                latest.insert(r.location_label.clone(), r.clone());
            }
        }
    }
    latest
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survey::{Next, Question, SurveyDefinition};
    use alloc::string::ToString;
    use alloc::vec;

    fn survey() -> Survey {
        let question = |id: &str, opts: &[&str], next: Next| Question {
            title: id.into(),
            options: opts.iter().map(|s| s.to_string()).collect(),
            icons: opts.iter().map(|s| s.to_lowercase()).collect(),
            next_question: vec![next; opts.len()],
            identifier: id.into(),
        };
        Survey::new(SurveyDefinition {
            survey_id: "s".into(),
            version: 1,
            questions: vec![
                question("tc-preference", &["Cooler", "No Change", "Warmer"], Next::Question(1)),
                question("location-place", &["Home", "Office", "Vehicle", "Other"], Next::End),
            ],
        })
        .unwrap()
    }

    fn ts(s: &str) -> Timestamp {
        s.parse().unwrap()
    }

    fn response(at: &str, location: &str, pref: &str) -> ResponsePayload {
        ResponsePayload {
            participant_id: "p1".into(),
            survey_id: "s".into(),
            survey_version: 1,
            started_at: ts(at),
            submitted_at: ts(at),
            answers: [
                ("tc-preference".to_string(), pref.to_string()),
                ("location-place".to_string(), location.to_string()),
            ]
            .into(),
            physiological: None,
            device_info: None,
        }
    }

    fn reading(at: &str, location: &str, temp: f64) -> SensorReading {
        SensorReading {
            logger_id: "L1".into(),
            location_label: location.into(),
            timestamp: ts(at),
            dry_bulb_temp_c: temp,
            relative_humidity_pct: 50.0,
        }
    }

    #[test]
    fn nearest_reading_wins() {
        let responses = [response("2021-03-01T08:15:30.000Z", "Office", "Cooler")];
        let readings = [
            reading("2021-03-01T08:10:00.000Z", "Office", 23.0),
            reading("2021-03-01T08:20:00.000Z", "Office", 24.0),
        ];
        let merged =
            merge_responses(&survey(), &responses, &readings, &MergeOptions::default()).unwrap();
        let m = merged[0].matched.unwrap();
        assert_eq!(m.reading.dry_bulb_temp_c, 24.0);
        assert_eq!(m.delta_seconds(), 270.0);
        assert_eq!(merged[0].status, MatchStatus::Matched);
    }

    #[test]
    fn equidistant_readings_resolve_to_the_earlier() {
        let responses = [response("2021-03-01T08:15:00.000Z", "Office", "Cooler")];
        let readings = [
            reading("2021-03-01T08:20:00.000Z", "Office", 24.0),
            reading("2021-03-01T08:10:00.000Z", "Office", 23.0),
        ];
        let merged =
            merge_responses(&survey(), &responses, &readings, &MergeOptions::default()).unwrap();
        assert_eq!(merged[0].matched.unwrap().delta_ms, -300_000);
    }

    #[test]
    fn statuses_for_missing_logger_and_distant_reading() {
        let responses = [
            response("2021-03-01T08:15:00.000Z", "Vehicle", "Cooler"),
            response("2021-03-01T12:00:00.000Z", "Office", "Warmer"),
        ];
        let readings = [reading("2021-03-01T08:10:00.000Z", "Office", 23.0)];
        let merged =
            merge_responses(&survey(), &responses, &readings, &MergeOptions::default()).unwrap();
        assert_eq!(merged[0].status, MatchStatus::NoLoggerForLocation);
        assert_eq!(merged[1].status, MatchStatus::NoReadingInWindow);
    }

    #[test]
    fn preconditions() {
        let opts = MergeOptions {
            window_seconds: 0,
            ..Default::default()
        };
        assert_eq!(
            merge_responses(&survey(), &[], &[], &opts),
            Err(FusionError::InvalidWindow)
        );
        let opts = MergeOptions {
            location_key: "room".into(),
            ..Default::default()
        };
        assert_eq!(
            merge_responses(&survey(), &[], &[], &opts),
            Err(FusionError::UnknownLocationKey("room".into()))
        );
    }

    #[test]
    fn uniform_preference_yields_unit_fractions() {
        let inputs: Vec<_> = (0..20)
            .map(|i| ProfileInput {
                participant_id: "p",
                preference: Some("No Change"),
                temperature_c: Some(20.0 + f64::from(i) * 0.37),
            })
            .collect();
        let profiles = preference_profiles(inputs, 1.0).unwrap();
        assert_eq!(profiles.len(), 1);
        assert_eq!(profiles[0].total_responses, 20);
        for bin in profiles[0].bins.values() {
            assert_eq!(bin.fractions()["No Change"], 1.0);
        }
    }

    #[test]
    fn negative_temperatures_bin_downward() {
        assert_eq!(bin_index(-0.5, 1.0), -1);
        assert_eq!(bin_index(0.0, 1.0), 0);
        assert_eq!(bin_index(23.99, 2.0), 11);
    }

    #[test]
    fn empty_input_gives_no_profiles() {
        assert!(preference_profiles(core::iter::empty(), 1.0).unwrap().is_empty());
        assert_eq!(
            preference_profiles(core::iter::empty(), 0.0),
            Err(FusionError::InvalidBinWidth)
        );
    }

    #[test]
    fn reading_ranges() {
        let mut r = reading("2021-03-01T08:10:00.000Z", "Office", 23.0);
        assert!(r.validate().is_ok());
        r.relative_humidity_pct = 101.0;
        assert_eq!(r.validate(), Err(ReadingViolation::HumidityOutOfRange));
        r.relative_humidity_pct = 50.0;
        r.dry_bulb_temp_c = -40.1;
        assert_eq!(r.validate(), Err(ReadingViolation::TemperatureOutOfRange));
    }
}
