//! Append-only JSON Lines streams, one file per stream per UTC day.
//!
//! Each data file `<stream>-YYYYMMDD.jsonl` has a sidecar
//! `<stream>-YYYYMMDD.idx` holding one `timestamp offset recordId` line per
//! record. Sidecars are advisory: on open they are checked against the data
//! file and rebuilt when missing or stale. A torn trailing line left by a
//! crash is cut off before any new append.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use chrono::NaiveDate;
use ema_core::fusion::SensorReading;
use ema_core::notify::DispatchRecord;
use ema_core::time::DAY_MS;
use ema_core::{ResponsePayload, Timestamp};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Responses,
    Sensor,
    Dispatches,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Responses, Stream::Sensor, Stream::Dispatches];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Responses => "responses",
            Stream::Sensor => "sensor",
            Stream::Dispatches => "dispatches",
        }
    }

    /// Whether every single append is flushed to disk before returning.
    fn sync_each(self) -> bool {
        !matches!(self, Stream::Sensor)
    }

    fn check_schema(self, body: &Value) -> Result<(), String> {
        match self {
            Stream::Responses => serde_json::from_value::<ResponsePayload>(body.clone())
                .map(drop)
                .map_err(|e| e.to_string()),
            Stream::Sensor => {
                let reading: SensorReading =
                    serde_json::from_value(body.clone()).map_err(|e| e.to_string())?;
                reading.validate().map_err(|e| e.to_string())
            }
            Stream::Dispatches => {
                let record: DispatchRecord =
                    serde_json::from_value(body.clone()).map_err(|e| e.to_string())?;
                match record.delivered_at {
                    Some(d) if d < record.triggered_at => {
                        Err("deliveredAt precedes triggeredAt".into())
                    }
                    _ => Ok(()),
                }
            }
        }
    }
}

impl FromStr for Stream {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stream::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stream {s:?}"))
    }
}

impl std::fmt::Display for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{stream} record rejected by schema: {reason}")]
    SchemaViolation { stream: Stream, reason: String },
    #[error("range start {from} is after end {to}")]
    InvalidRange { from: Timestamp, to: Timestamp },
    #[error("{path}: line {line} is not a stream record")]
    Corrupt { path: PathBuf, line: usize },
    #[error("storage failure: {0}")]
    Storage(#[from] io::Error),
}

/// One stored line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StreamRecord {
    pub record_id: u64,
    pub timestamp: Timestamp,
    pub body: Value,
}

/// Dotted-path equality on body fields, e.g. `participantId=P1` or
/// `physiological.stepCount=12`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Filter {
    pub path: Vec<String>,
    pub value: String,
}

impl Filter {
    pub fn new(path: &str, value: &str) -> Self {
        Filter {
            path: path.split('.').map(str::to_owned).collect(),
            value: value.to_owned(),
        }
    }

    pub fn matches(&self, body: &Value) -> bool {
        let mut cur = body;
        for key in &self.path {
            match cur.get(key) {
                Some(v) => cur = v,
                None => return false,
            }
        }
        match cur {
            Value::String(s) => *s == self.value,
            Value::Number(_) | Value::Bool(_) => serde_json::from_str::<Value>(&self.value).is_ok_and(|v| &v == cur),
            _ => false,
        }
    }
}

impl FromStr for Filter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('=') {
            Some((k, v)) if !k.is_empty() => Ok(Filter::new(k, v)),
            _ => Err(format!("filter {s:?} is not key=value")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct IndexEntry {
    timestamp: i64,
    offset: u64,
    record_id: u64,
}

struct DayFile {
    data: File,
    index: BufWriter<File>,
    len: u64,
    entries: Vec<IndexEntry>,
}

struct StreamState {
    last_id: u64,
    days: BTreeMap<i64, DayFile>,
}

pub struct Store {
    dir: PathBuf,
    streams: HashMap<Stream, Mutex<StreamState>>,
    reads: AtomicU64,
    writes: AtomicU64,
}

fn day_of(ts: Timestamp) -> i64 {
    ts.as_millis().div_euclid(DAY_MS)
}

fn day_stem(stream: Stream, day: i64) -> String {
    let date = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap() + chrono::Duration::days(day);
    format!("{}-{}", stream.name(), date.format("%Y%m%d"))
}

fn parse_day(stream: Stream, file_name: &str) -> Option<i64> {
    let digits = file_name
        .strip_prefix(stream.name())?
        .strip_prefix('-')?
        .strip_suffix(".jsonl")?;
    let date = NaiveDate::parse_from_str(digits, "%Y%m%d").ok()?;
    Some((date - NaiveDate::from_ymd_opt(1970, 1, 1).unwrap()).num_days())
}

/// Reads every complete line; truncates a torn tail.
fn scan_data_file(path: &Path) -> Result<(Vec<IndexEntry>, u64), StoreError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut entries = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0;
    while let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') {
        line_no += 1;
        let line = &bytes[offset..offset + nl];
        let rec: StreamRecord = serde_json::from_slice(line).map_err(|_| StoreError::Corrupt {
            path: path.to_owned(),
            line: line_no,
        })?;
        entries.push(IndexEntry {
            timestamp: rec.timestamp.as_millis(),
            offset: offset as u64,
            record_id: rec.record_id,
        });
        offset += nl + 1;
    }
    if offset < bytes.len() {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(offset as u64)?;
        f.sync_all()?;
        tracing::warn!(path = %path.display(), dropped = bytes.len() - offset, "truncated torn record");
    }
    Ok((entries, offset as u64))
}

fn read_sidecar(path: &Path) -> Option<Vec<IndexEntry>> {
    let text = fs::read_to_string(path).ok()?;
    text.lines()
        .map(|l| {
            let mut it = l.split(' ').map(str::parse::<i64>);
            let e = IndexEntry {
                timestamp: it.next()?.ok()?,
                offset: u64::try_from(it.next()?.ok()?).ok()?,
                record_id: u64::try_from(it.next()?.ok()?).ok()?,
            };
            it.next().is_none().then_some(e)
        })
        .collect()
}

fn sidecar_line(e: &IndexEntry) -> String {
    format!("{} {} {}\n", e.timestamp, e.offset, e.record_id)
}

/// Cheap consistency check: the sidecar must index exactly the complete
/// lines of the data file, each entry pointing at a line start.
fn sidecar_consistent(entries: &[IndexEntry], data: &[u8]) -> bool {
    let lines = data.iter().filter(|&&b| b == b'\n').count();
    if entries.len() != lines || data.last().is_some_and(|&b| b != b'\n') {
        return false;
    }
    let mut expected_start = 0u64;
    for (i, e) in entries.iter().enumerate() {
        if e.offset != expected_start {
            return false;
        }
        let end = data[e.offset as usize..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| e.offset + p as u64 + 1);
        match end {
            Some(end) => expected_start = end,
            None => return false,
        }
        if i + 1 == entries.len() && end != Some(data.len() as u64) {
            return false;
        }
    }
    true
}

fn open_day(dir: &Path, stream: Stream, day: i64) -> Result<DayFile, StoreError> {
    let stem = day_stem(stream, day);
    let data_path = dir.join(format!("{stem}.jsonl"));
    let idx_path = dir.join(format!("{stem}.idx"));
    if !data_path.exists() {
        File::create(&data_path)?;
    }
    let data_bytes = fs::read(&data_path)?;
    let entries = match read_sidecar(&idx_path) {
        Some(e) if sidecar_consistent(&e, &data_bytes) => e,
        _ => {
            let (entries, _) = scan_data_file(&data_path)?;
            let mut w = BufWriter::new(File::create(&idx_path)?);
            for e in &entries {
                w.write_all(sidecar_line(e).as_bytes())?;
            }
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            entries
        }
    };
    let data = OpenOptions::new().append(true).open(&data_path)?;
    let len = data.metadata()?.len();
    let index = BufWriter::new(OpenOptions::new().append(true).open(&idx_path)?);
    Ok(DayFile {
        data,
        index,
        len,
        entries,
    })
}

impl Store {
    /// Opens (creating if needed) the stream directory and recovers every
    /// day file found in it.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Store, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut streams = HashMap::new();
        for stream in Stream::ALL {
            let mut days = BTreeMap::new();
            for entry in fs::read_dir(&dir)? {
                let name = entry?.file_name();
                if let Some(day) = name.to_str().and_then(|n| parse_day(stream, n)) {
                    days.insert(day, open_day(&dir, stream, day)?);
                }
            }
            let last_id = days
                .values()
                .filter_map(|d| d.entries.last().map(|e| e.record_id))
                .max()
                .unwrap_or(0);
            streams.insert(stream, Mutex::new(StreamState { last_id, days }));
        }
        Ok(Store {
            dir,
            streams,
            reads: AtomicU64::new(0),
            writes: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Number of read and write operations served so far.
    pub fn access_count(&self) -> u64 {
        self.reads.load(Ordering::SeqCst) + self.writes.load(Ordering::SeqCst)
    }

    pub fn last_id(&self, stream: Stream) -> u64 {
        self.state(stream).last_id
    }

    fn state(&self, stream: Stream) -> std::sync::MutexGuard<'_, StreamState> {
        self.streams[&stream]
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    /// Appends one record; durable on return for responses and dispatches.
    pub fn append(&self, stream: Stream, timestamp: Timestamp, body: Value) -> Result<u64, StoreError> {
        let ids = self.append_batch(stream, vec![(timestamp, body)])?;
        Ok(ids[0])
    }

    /// Appends records in order and flushes once at the end. All bodies are
    /// schema-checked before anything is written.
    pub fn append_batch(
        &self,
        stream: Stream,
        records: Vec<(Timestamp, Value)>,
    ) -> Result<Vec<u64>, StoreError> {
        self.writes.fetch_add(1, Ordering::SeqCst);
        for (_, body) in &records {
            stream
                .check_schema(body)
                .map_err(|reason| StoreError::SchemaViolation { stream, reason })?;
        }
        let mut state = self.state(stream);
        let mut ids = Vec::with_capacity(records.len());
        let mut touched = Vec::new();
        for (timestamp, body) in records {
            let record_id = state.last_id + 1;
            let day = day_of(timestamp);
            let file = match state.days.entry(day) {
                std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::btree_map::Entry::Vacant(e) => e.insert(open_day(&self.dir, stream, day)?),
            };
            let mut line = serde_json::to_vec(&StreamRecord {
                record_id,
                timestamp,
                body,
            })
            .expect("json values always serialize");
            line.push(b'\n');
            file.data.write_all(&line)?;
            let entry = IndexEntry {
                timestamp: timestamp.as_millis(),
                offset: file.len,
                record_id,
            };
            file.len += line.len() as u64;
            file.index.write_all(sidecar_line(&entry).as_bytes())?;
            if stream.sync_each() {
                file.data.sync_data()?;
            } else if !touched.contains(&day) {
                touched.push(day);
            }
            file.entries.push(entry);
            state.last_id = record_id;
            ids.push(record_id);
        }
        for day in touched {
            state.days.get_mut(&day).expect("touched day exists").data.sync_data()?;
        }
        for f in state.days.values_mut() {
            f.index.flush()?;
        }
        Ok(ids)
    }

    /// Records with `from <= timestamp < to` matching `filter`, ordered by
    /// (timestamp, recordId).
    pub fn query_range(
        &self,
        stream: Stream,
        from: Timestamp,
        to: Timestamp,
        filter: Option<&Filter>,
    ) -> Result<Vec<StreamRecord>, StoreError> {
        if from > to {
            return Err(StoreError::InvalidRange { from, to });
        }
        self.reads.fetch_add(1, Ordering::SeqCst);
        let (lo, hi) = (from.as_millis(), to.as_millis());
        let wanted: Vec<(i64, Vec<IndexEntry>)> = {
            let state = self.state(stream);
            state
                .days
                .range(day_of(from)..=day_of(to))
                .map(|(&day, f)| {
                    let hits = f
                        .entries
                        .iter()
                        .filter(|e| e.timestamp >= lo && e.timestamp < hi)
                        .copied()
                        .collect();
                    (day, hits)
                })
                .filter(|(_, hits): &(i64, Vec<IndexEntry>)| !hits.is_empty())
                .collect()
        };
        let mut out = Vec::new();
        for (day, hits) in wanted {
            let path = self.dir.join(format!("{}.jsonl", day_stem(stream, day)));
            let mut reader = BufReader::new(File::open(&path)?);
            let mut line = String::new();
            for e in hits {
                reader.seek(SeekFrom::Start(e.offset))?;
                line.clear();
                reader.read_line(&mut line)?;
                let rec: StreamRecord =
                    serde_json::from_str(&line).map_err(|_| StoreError::Corrupt {
                        path: path.clone(),
                        line: 0,
                    })?;
                if filter.is_none_or(|f| f.matches(&rec.body)) {
                    out.push(rec);
                }
            }
        }
        out.sort_by_key(|r| (r.timestamp, r.record_id));
        Ok(out)
    }

    /// Every record of a stream.
    pub fn scan(&self, stream: Stream) -> Result<Vec<StreamRecord>, StoreError> {
        self.query_range(
            stream,
            Timestamp::from_millis(i64::MIN / 2),
            Timestamp::from_millis(i64::MAX / 2),
            None,
        )
    }

    /// Paths of all data files, for audits and backups.
    pub fn data_files(&self) -> Result<Vec<PathBuf>, StoreError> {
        let mut files: Vec<PathBuf> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        Ok(files)
    }
}
