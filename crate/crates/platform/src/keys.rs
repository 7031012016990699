//! API keys presented as `X-Api-Key: <keyId>.<secret>`.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

#[derive(Clone, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ApiKey {
    pub key_id: String,
    secret: String,
    #[serde(default)]
    pub rate_per_hour: Option<u32>,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

fn enabled_default() -> bool {
    true
}

impl ApiKey {
    pub fn new(key_id: &str, secret: &str, rate_per_hour: Option<u32>) -> Self {
        ApiKey {
            key_id: key_id.into(),
            secret: secret.into(),
            rate_per_hour,
            enabled: true,
        }
    }

    /// `<keyId>.<secret>`, the header value a client sends.
    pub fn credential(&self) -> String {
        format!("{}.{}", self.key_id, self.secret)
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ApiKey")
            .field("key_id", &self.key_id)
            .field("secret", &"<redacted>")
            .field("rate_per_hour", &self.rate_per_hour)
            .field("enabled", &self.enabled)
            .finish()
    }
}

#[derive(Debug, Error)]
pub enum KeyStoreError {
    #[error("cannot read key store: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid key store: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("key {0:?} is invalid: {1}")]
    InvalidKey(String, &'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("missing API key")]
    Missing,
    #[error("invalid API key")]
    Invalid,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyFile {
    keys: Vec<ApiKey>,
}

#[derive(Debug, Clone, Default)]
pub struct KeyStore {
    keys: Vec<ApiKey>,
}

/// Equality whose running time does not depend on where inputs differ.
fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

impl KeyStore {
    pub fn new(keys: Vec<ApiKey>) -> Result<Self, KeyStoreError> {
        for (i, k) in keys.iter().enumerate() {
            if k.key_id.is_empty() || k.key_id.contains('.') {
                return Err(KeyStoreError::InvalidKey(k.key_id.clone(), "keyId must be non-empty without '.'"));
            }
            if k.secret.len() < 16 {
                return Err(KeyStoreError::InvalidKey(k.key_id.clone(), "secret shorter than 16 bytes"));
            }
            if k.rate_per_hour == Some(0) {
                return Err(KeyStoreError::InvalidKey(k.key_id.clone(), "ratePerHour must be positive"));
            }
            if keys[..i].iter().any(|o| o.key_id == k.key_id) {
                return Err(KeyStoreError::InvalidKey(k.key_id.clone(), "duplicate keyId"));
            }
        }
        Ok(KeyStore { keys })
    }

    /// Reads `{"keys": [{"keyId", "secret", "ratePerHour"?, "enabled"?}]}`.
    pub fn load(path: &Path) -> Result<Self, KeyStoreError> {
        let file: KeyFile = serde_json::from_slice(&fs::read(path)?)?;
        KeyStore::new(file.keys)
    }

    pub fn keys(&self) -> &[ApiKey] {
        &self.keys
    }

    pub fn authenticate(&self, header: Option<&str>) -> Result<&ApiKey, AuthError> {
        let header = header.ok_or(AuthError::Missing)?;
        let (id, secret) = header.split_once('.').ok_or(AuthError::Invalid)?;
        self.keys
            .iter()
            .find(|k| k.key_id == id)
            .filter(|k| ct_eq(k.secret.as_bytes(), secret.as_bytes()) && k.enabled)
            .ok_or(AuthError::Invalid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn authenticates_only_enabled_exact_secrets() {
        let mut off = ApiKey::new("off", "0123456789abcdef", None);
        off.enabled = false;
        let store = KeyStore::new(vec![ApiKey::new("watch", "0123456789abcdef", Some(60)), off]).unwrap();
        assert_eq!(store.authenticate(Some("watch.0123456789abcdef")).unwrap().key_id, "watch");
        assert_eq!(store.authenticate(None).unwrap_err(), AuthError::Missing);
        assert_eq!(store.authenticate(Some("watch.0123456789abcdeX")).unwrap_err(), AuthError::Invalid);
        assert_eq!(store.authenticate(Some("watch")).unwrap_err(), AuthError::Invalid);
        assert_eq!(store.authenticate(Some("off.0123456789abcdef")).unwrap_err(), AuthError::Invalid);
    }

    #[test]
    fn debug_output_hides_secret() {
        let key = ApiKey::new("watch", "s3cr3t-s3cr3t-s3cr3t", None);
        assert!(!format!("{key:?}").contains("s3cr3t"));
    }

    #[test]
    fn rejects_weak_or_duplicate_keys() {
        assert!(KeyStore::new(vec![ApiKey::new("a", "short", None)]).is_err());
        let k = ApiKey::new("a", "0123456789abcdef", None);
        assert!(KeyStore::new(vec![k.clone(), k]).is_err());
    }
}
