//! Submitted survey responses and their physiological snapshot.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::survey::{AnswerEntry, AnswerViolation, Survey};
use crate::time::Timestamp;

/// Watch-side readings captured right after submission. Every field is
/// optional: absent means "no recent sample", never zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Physiological {
    /// Beats per minute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heart_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_count: Option<u64>,
    /// Decimal degrees.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub longitude: Option<f64>,
    /// Kilograms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    /// Metres.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
    /// Kilocalories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basal_energy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResponsePayload {
    pub participant_id: String,
    pub survey_id: String,
    pub survey_version: u32,
    pub started_at: Timestamp,
    pub submitted_at: Timestamp,
    /// Question identifier to chosen option text.
    pub answers: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub physiological: Option<Physiological>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_info: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "code", rename_all = "camelCase")]
pub enum PayloadViolation {
    EmptyParticipantId,
    SubmittedBeforeStarted,
    OutOfRange { field: String, value: f64 },
    /// Latitude and longitude must be given together.
    IncompleteCoordinates,
    #[serde(untagged)]
    Answer(AnswerViolation),
}

fn check_open(
    out: &mut Vec<PayloadViolation>,
    field: &str,
    value: Option<f64>,
    low: f64,
    high: f64,
    inclusive: bool,
) {
    let Some(v) = value else { return };
    let ok = if inclusive {
        v >= low && v <= high
    } else {
        v > low && v < high
    };
    if !ok || !v.is_finite() {
        out.push(PayloadViolation::OutOfRange {
            field: field.into(),
            value: v,
        });
    }
}

impl Physiological {
    pub fn violations(&self) -> Vec<PayloadViolation> {
        let mut out = Vec::new();
        check_open(&mut out, "physiological.heartRate", self.heart_rate, 0.0, 300.0, false);
        check_open(&mut out, "physiological.latitude", self.latitude, -90.0, 90.0, true);
        check_open(&mut out, "physiological.longitude", self.longitude, -180.0, 180.0, true);
        check_open(&mut out, "physiological.weight", self.weight, 0.0, 500.0, false);
        check_open(&mut out, "physiological.height", self.height, 0.0, 3.0, false);
        check_open(&mut out, "physiological.basalEnergy", self.basal_energy, 0.0, f64::MAX, true);
        if self.latitude.is_some() != self.longitude.is_some() {
            out.push(PayloadViolation::IncompleteCoordinates);
        }
        out
    }
}

impl ResponsePayload {
    /// Checks the payload against `survey`, which must be the definition the
    /// payload names. On success returns the answered path in flow order.
    pub fn validate(&self, survey: &Survey) -> Result<Vec<AnswerEntry>, Vec<PayloadViolation>> {
        let mut out = Vec::new();
        if self.participant_id.trim().is_empty() {
            out.push(PayloadViolation::EmptyParticipantId);
        }
        if self.submitted_at < self.started_at {
            out.push(PayloadViolation::SubmittedBeforeStarted);
        }
        if let Some(p) = &self.physiological {
            out.extend(p.violations());
        }
        let trail = match survey.trace_answers(&self.answers) {
            Ok(trail) => trail,
            Err(problems) => {
                out.extend(problems.into_iter().map(PayloadViolation::Answer));
                Vec::new()
            }
        };
        if out.is_empty() {
            Ok(trail)
        } else {
            Err(out)
        }
    }

    pub fn answer(&self, identifier: &str) -> Option<&str> {
        self.answers.get(identifier).map(String::as_str)
    }
}
