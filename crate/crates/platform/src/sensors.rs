//! Environmental logger CSV parsing and import into the sensor stream.

use std::collections::HashSet;
use std::io::Read;

use ema_core::fusion::{ReadingViolation, SensorReading};
use ema_core::Timestamp;
use flate2::read::GzDecoder;
use serde::Serialize;
use thiserror::Error;

use crate::store::{Store, StoreError, Stream};

pub const HEADER: [&str; 5] = [
    "loggerId",
    "locationLabel",
    "timestamp",
    "dryBulbTempC",
    "relativeHumidityPct",
];

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];
const IMPORT_BATCH: usize = 1_000;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("malformed header: expected {expected}, found {found:?}")]
    MalformedHeader { expected: String, found: String },
    #[error("cannot decompress input: {0}")]
    Decompress(std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RejectReason {
    FieldCount { found: usize },
    Unreadable { detail: String },
    BadTimestamp { value: String },
    /// Offsets other than `Z` are refused; convert to UTC upstream.
    NonUtcTimestamp { value: String },
    BadNumber { field: &'static str, value: String },
    Invalid { violation: ReadingViolation },
}

impl RejectReason {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::FieldCount { .. } => "fieldCount",
            RejectReason::Unreadable { .. } => "unreadable",
            RejectReason::BadTimestamp { .. } => "badTimestamp",
            RejectReason::NonUtcTimestamp { .. } => "nonUtcTimestamp",
            RejectReason::BadNumber { .. } => "badNumber",
            RejectReason::Invalid { violation } => match violation {
                ReadingViolation::EmptyLoggerId => "emptyLoggerId",
                ReadingViolation::EmptyLocation => "emptyLocation",
                ReadingViolation::TemperatureOutOfRange => "temperatureOutOfRange",
                ReadingViolation::HumidityOutOfRange => "humidityOutOfRange",
            },
        }
    }
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::FieldCount { found } => write!(f, "expected 5 fields, found {found}"),
            RejectReason::Unreadable { detail } => write!(f, "unreadable line: {detail}"),
            RejectReason::BadTimestamp { value } => write!(f, "bad timestamp {value:?}"),
            RejectReason::NonUtcTimestamp { value } => write!(f, "timestamp {value:?} is not UTC"),
            RejectReason::BadNumber { field, value } => write!(f, "{field}: {value:?} is not a number"),
            RejectReason::Invalid { violation } => write!(f, "{violation}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reject {
    /// 1-based line number in the (decompressed) file.
    pub line: u64,
    pub reason: RejectReason,
}

impl Serialize for Reject {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Reject", 3)?;
        st.serialize_field("line", &self.line)?;
        st.serialize_field("reason", self.reason.code())?;
        st.serialize_field("detail", &self.reason.to_string())?;
        st.end()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ParsedCsv {
    pub readings: Vec<SensorReading>,
    pub rejects: Vec<Reject>,
}

/// Decompresses gzip input (detected by magic bytes); passes plain input through.
pub fn decode(bytes: &[u8]) -> Result<Vec<u8>, SensorError> {
    if bytes.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(SensorError::Decompress)?;
        Ok(out)
    } else {
        Ok(bytes.to_vec())
    }
}

fn parse_number(field: &'static str, raw: &str) -> Result<f64, RejectReason> {
    raw.parse().map_err(|_| RejectReason::BadNumber {
        field,
        value: raw.into(),
    })
}

fn parse_record(rec: &csv::StringRecord) -> Result<SensorReading, RejectReason> {
    if rec.len() != HEADER.len() {
        return Err(RejectReason::FieldCount { found: rec.len() });
    }
    let raw_ts = &rec[2];
    if !raw_ts.ends_with('Z') {
        return match raw_ts.parse::<Timestamp>() {
            Ok(_) => Err(RejectReason::NonUtcTimestamp { value: raw_ts.into() }),
            Err(_) => Err(RejectReason::BadTimestamp { value: raw_ts.into() }),
        };
    }
    let timestamp = raw_ts.parse::<Timestamp>().map_err(|_| RejectReason::BadTimestamp {
        value: raw_ts.into(),
    })?;
    let reading = SensorReading {
        logger_id: rec[0].into(),
        location_label: rec[1].into(),
        timestamp,
        dry_bulb_temp_c: parse_number("dryBulbTempC", &rec[3])?,
        relative_humidity_pct: parse_number("relativeHumidityPct", &rec[4])?,
    };
    reading
        .validate()
        .map_err(|violation| RejectReason::Invalid { violation })?;
    Ok(reading)
}

/// Parses a logger export. Every non-blank data line yields exactly one
/// reading or one reject.
pub fn parse_csv(bytes: &[u8]) -> Result<ParsedCsv, SensorError> {
    let text = decode(bytes)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .quoting(false)
        .from_reader(text.as_slice());
    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => {
            return Err(SensorError::MalformedHeader {
                expected: HEADER.join(","),
                found: e.to_string(),
            })
        }
        None => {
            return Err(SensorError::MalformedHeader {
                expected: HEADER.join(","),
                found: String::new(),
            })
        }
    };
    if header.iter().ne(HEADER) {
        return Err(SensorError::MalformedHeader {
            expected: HEADER.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut out = ParsedCsv::default();
    for rec in records {
        match rec {
            Ok(rec) => {
                let line = rec.position().map_or(0, |p| p.line());
                match parse_record(&rec) {
                    Ok(r) => out.readings.push(r),
                    Err(reason) => out.rejects.push(Reject { line, reason }),
                }
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                out.rejects.push(Reject {
                    line,
                    reason: RejectReason::Unreadable {
                        detail: e.to_string(),
                    },
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ImportSummary {
    pub imported: usize,
    pub duplicates: usize,
}

/// Appends readings not already stored, keyed by (loggerId, timestamp).
/// Flushes to disk once per batch.
pub fn import_readings(store: &Store, readings: &[SensorReading]) -> Result<ImportSummary, SensorError> {
    let mut seen: HashSet<(String, Timestamp)> = store
        .scan(Stream::Sensor)?
        .into_iter()
        .filter_map(|r| serde_json::from_value::<SensorReading>(r.body).ok())
        .map(|r| (r.logger_id, r.timestamp))
        .collect();
    let mut summary = ImportSummary::default();
    let mut batch = Vec::new();
    for r in readings {
        if !seen.insert((r.logger_id.clone(), r.timestamp)) {
            summary.duplicates += 1;
            continue;
        }
        let body = serde_json::to_value(r).expect("readings serialize");
        batch.push((r.timestamp, body));
        if batch.len() == IMPORT_BATCH {
            summary.imported += store.append_batch(Stream::Sensor, std::mem::take(&mut batch))?.len();
        }
    }
    if !batch.is_empty() {
        summary.imported += store.append_batch(Stream::Sensor, batch)?.len();
    }
    Ok(summary)
}
