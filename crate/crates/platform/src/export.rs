//! CSV exports: merged response/sensor datasets and raw streams.

use std::collections::{BTreeMap, BTreeSet};

use ema_core::fusion::{preference_profiles, FusionError, MergedRecord, PreferenceProfile, ProfileInput};
use ema_core::registry::{AnswerValue, Answers};
use ema_core::Survey;
use serde_json::Value;
use thiserror::Error;

use crate::store::StreamRecord;

pub const ONBOARDING_PREFIX: &str = "onboarding.";

const PHYSIOLOGICAL_COLUMNS: [&str; 4] = ["heartRate", "stepCount", "latitude", "longitude"];
const SENSOR_COLUMNS: [&str; 4] = ["dryBulbTempC", "relativeHumidityPct", "deltaSeconds", "matchStatus"];

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn answer_text(v: &AnswerValue) -> String {
    match v {
        AnswerValue::Bool(b) => b.to_string(),
        AnswerValue::Number(n) => n.to_string(),
        AnswerValue::Text(t) => t.clone(),
    }
}

/// Column names, in order, for a merged export of `survey`.
pub fn merged_header(survey: &Survey, onboarding_keys: &BTreeSet<String>) -> Vec<String> {
    let mut cols = vec!["participantId".to_string(), "submittedAt".to_string()];
    cols.extend(survey.identifiers().map(str::to_owned));
    cols.extend(PHYSIOLOGICAL_COLUMNS.iter().map(|s| s.to_string()));
    cols.extend(SENSOR_COLUMNS.iter().map(|s| s.to_string()));
    cols.extend(onboarding_keys.iter().map(|k| format!("{ONBOARDING_PREFIX}{k}")));
    cols
}

/// One row per merged record. Onboarding answers, keyed by participant id,
/// are appended as `onboarding.<field>` columns when any are given.
pub fn merged_csv(
    survey: &Survey,
    merged: &[MergedRecord<'_>],
    onboarding: &BTreeMap<String, Answers>,
) -> Result<Vec<u8>, ExportError> {
    let keys: BTreeSet<String> = onboarding.values().flat_map(|a| a.keys().cloned()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(merged_header(survey, &keys))?;
    for m in merged {
        let r = m.response;
        let phys = r.physiological.clone().unwrap_or_default();
        let mut row = vec![r.participant_id.clone(), r.submitted_at.to_string()];
        row.extend(survey.identifiers().map(|id| r.answer(id).unwrap_or_default().to_owned()));
        row.extend([
            opt(phys.heart_rate),
            opt(phys.step_count),
            opt(phys.latitude),
            opt(phys.longitude),
            opt(m.matched.map(|x| x.reading.dry_bulb_temp_c)),
            opt(m.matched.map(|x| x.reading.relative_humidity_pct)),
            opt(m.matched.map(|x| x.delta_seconds())),
            m.status.as_str().to_owned(),
        ]);
        let answers = onboarding.get(&r.participant_id);
        row.extend(
            keys.iter()
                .map(|k| answers.and_then(|a| a.get(k)).map(answer_text).unwrap_or_default()),
        );
        w.write_record(row)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

/// Profile input recovered from an exported row.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedRow {
    pub participant_id: String,
    pub preference: Option<String>,
    pub temperature_c: Option<f64>,
}

/// Reads back the columns a preference profile needs.
pub fn read_merged_csv(bytes: &[u8], preference_key: &str) -> Result<Vec<ExportedRow>, ExportError> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ExportError::MissingColumn(name.into()))
    };
    let (pid, pref, temp) = (col("participantId")?, col(preference_key)?, col("dryBulbTempC")?);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let temperature_c = match &rec[temp] {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|e| ExportError::BadRow {
                row: i + 1,
                reason: e.to_string(),
            })?),
        };
        rows.push(ExportedRow {
            participant_id: rec[pid].to_owned(),
            preference: Some(&rec[pref]).filter(|s| !s.is_empty()).map(str::to_owned),
            temperature_c,
        });
    }
    Ok(rows)
}

pub fn profiles_from_rows(rows: &[ExportedRow], bin_width_c: f64) -> Result<Vec<PreferenceProfile>, ExportError> {
    Ok(preference_profiles(
        rows.iter().map(|r| ProfileInput {
            participant_id: &r.participant_id,
            preference: r.preference.as_deref(),
            temperature_c: r.temperature_c,
        }),
        bin_width_c,
    )?)
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, child, out);
            }
        }
        Value::Null => {}
        Value::String(s) => {
            out.insert(prefix.to_owned(), s.clone());
        }
        other => {
            out.insert(prefix.to_owned(), other.to_string());
        }
    }
}

/// Flattened body fields with dotted names, e.g. `physiological.heartRate`.
pub fn flatten(body: &Value) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    flatten_into("", body, &mut out);
    out
}

/// `recordId,timestamp` followed by the sorted union of flattened body fields.
/// Body fields named like the two leading columns are omitted.
pub fn stream_csv(records: &[StreamRecord]) -> Result<Vec<u8>, ExportError> {
    let flat: Vec<BTreeMap<String, String>> = records.iter().map(|r| flatten(&r.body)).collect();
    let columns: BTreeSet<&String> = flat
        .iter()
        .flat_map(|m| m.keys())
        .filter(|k| *k != "recordId" && *k != "timestamp")
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["recordId".to_string(), "timestamp".to_string()];
    header.extend(columns.iter().map(|c| c.to_string()));
    w.write_record(&header)?;
    for (rec, fields) in records.iter().zip(&flat) {
        let mut row = vec![rec.record_id.to_string(), rec.timestamp.to_string()];
        row.extend(columns.iter().map(|c| fields.get(*c).cloned().unwrap_or_default()));
        w.write_record(row)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flatten_uses_dotted_paths_and_skips_nulls() {
        let f = flatten(&json!({"a": 1, "b": {"c": "x", "d": null}, "e": [1, 2]}));
        assert_eq!(f["a"], "1");
        assert_eq!(f["b.c"], "x");
        assert!(!f.contains_key("b.d"));
        assert_eq!(f["e"], "[1,2]");
    }
}
