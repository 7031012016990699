//! Pure logic for comfort-survey studies: branching survey
//! flows, response validation, per-key rate limiting, survey/sensor fusion,
//! notification planning, and participant lifecycle.
//!
//! The crate is `no_std` with `alloc`; storage, HTTP and file formats live in
//! `ema-platform`.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod fusion;
pub mod notify;
pub mod payload;
pub mod ratelimit;
pub mod registry;
pub mod schedule;
pub mod survey;
pub mod time;

pub use fusion::{MatchStatus, MergeOptions, MergedRecord, PreferenceProfile, SensorReading};
pub use payload::{Physiological, ResponsePayload};
pub use survey::{Next, Question, Survey, SurveyDefinition, SurveySession};
pub use time::Timestamp;
