//! Std-side companion to `ema-core`: on-disk streams, the HTTP service,
//! sensor CSV import, participant registry persistence, notification
//! runtime and CSV exports. The `ema` binary wires these together.

pub mod cli;
pub mod config;
pub mod export;
pub mod keys;
pub mod notify;
pub mod registry;
pub mod sensors;
pub mod service;
pub mod store;

pub use config::Config;
pub use store::{Store, Stream};
