//! Participant registry persisted as append-only JSON Lines snapshots in its
//! own directory, separate from every data stream.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard};

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::{Algorithm, Argon2, Params, Version};
use ema_core::registry::{
    check_password, is_valid_email, Answers, EligibilityRule, Participant, RandomId,
    RegistryError, ScreeningVerdict,
};
use ema_core::Timestamp;
use rand::RngCore;
use thiserror::Error;

use crate::config::HashCost;

pub const REGISTRY_FILE: &str = "participants.jsonl";

#[derive(Debug, Error)]
pub enum RegistryStoreError {
    #[error(transparent)]
    Rule(#[from] RegistryError),
    #[error("registry storage failure: {0}")]
    Io(#[from] io::Error),
    #[error("{path}: line {line} is not a participant snapshot")]
    Corrupt { path: PathBuf, line: usize },
    #[error("credential hashing failed: {0}")]
    Hash(String),
}

struct Inner {
    by_id: BTreeMap<RandomId, Participant>,
    by_email: HashMap<String, RandomId>,
    log: File,
}

pub struct Registry {
    path: PathBuf,
    inner: Mutex<Inner>,
    hasher: Argon2<'static>,
    rule: EligibilityRule,
    accesses: AtomicU64,
}

fn normalize_email(email: &str) -> String {
    email.trim().to_lowercase()
}

fn credential_input(email: &str, password: &str) -> Vec<u8> {
    let mut v = normalize_email(email).into_bytes();
    v.push(0);
    v.extend_from_slice(password.as_bytes());
    v
}

/// Read-only projection that never carries email or credential.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ParticipantView {
    pub random_id: RandomId,
    pub stage: ema_core::registry::Stage,
    pub eligibility: ema_core::registry::Eligibility,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consent_signed_at: Option<Timestamp>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub onboarding: Option<Answers>,
    pub has_push_token: bool,
}

impl From<&Participant> for ParticipantView {
    fn from(p: &Participant) -> Self {
        ParticipantView {
            random_id: p.random_id.clone(),
            stage: p.stage(),
            eligibility: p.eligibility,
            consent_signed_at: p.consent.as_ref().map(|c| c.signed_at),
            onboarding: p.onboarding.clone(),
            has_push_token: p.push_token.is_some(),
        }
    }
}

impl Registry {
    /// Opens `dir/participants.jsonl`, replaying snapshots (last one per id wins).
    pub fn open(
        dir: &Path,
        rule: EligibilityRule,
        cost: HashCost,
    ) -> Result<Registry, RegistryStoreError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(REGISTRY_FILE);
        let mut by_id = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            let complete = match text.rfind('\n') {
                Some(i) => &text[..=i],
                None => "",
            };
            for (i, line) in complete.lines().enumerate() {
                let p: Participant =
                    serde_json::from_str(line).map_err(|_| RegistryStoreError::Corrupt {
                        path: path.clone(),
                        line: i + 1,
                    })?;
                by_id.insert(p.random_id.clone(), p);
            }
            if complete.len() < text.len() {
                let f = OpenOptions::new().write(true).open(&path)?;
                f.set_len(complete.len() as u64)?;
                f.sync_all()?;
            }
        }
        let by_email = by_id
            .values()
            .map(|p| (normalize_email(&p.email), p.random_id.clone()))
            .collect();
        let log = OpenOptions::new().create(true).append(true).open(&path)?;
        let params = Params::new(cost.memory_kib, cost.iterations, cost.parallelism, None)
            .map_err(|e| RegistryStoreError::Hash(e.to_string()))?;
        Ok(Registry {
            path,
            inner: Mutex::new(Inner {
                by_id,
                by_email,
                log,
            }),
            hasher: Argon2::new(Algorithm::Argon2id, Version::V0x13, params),
            rule,
            accesses: AtomicU64::new(0),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn eligibility_rule(&self) -> &EligibilityRule {
        &self.rule
    }

    /// Number of operations that touched registry state.
    pub fn access_count(&self) -> u64 {
        self.accesses.load(Ordering::SeqCst)
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.accesses.fetch_add(1, Ordering::SeqCst);
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn persist(inner: &mut Inner, p: &Participant) -> Result<(), RegistryStoreError> {
        let mut line = serde_json::to_vec(p).expect("participants serialize");
        line.push(b'\n');
        inner.log.write_all(&line)?;
        inner.log.sync_data()?;
        Ok(())
    }

    pub fn hash_credential(&self, email: &str, password: &str) -> Result<String, RegistryStoreError> {
        let mut salt = [0u8; 16];
        rand::rng().fill_bytes(&mut salt);
        let salt = SaltString::encode_b64(&salt).map_err(|e| RegistryStoreError::Hash(e.to_string()))?;
        self.hasher
            .hash_password(&credential_input(email, password), &salt)
            .map(|h| h.to_string())
            .map_err(|e| RegistryStoreError::Hash(e.to_string()))
    }

    pub fn register(&self, email: &str, password: &str) -> Result<Participant, RegistryStoreError> {
        if !is_valid_email(email.trim()) {
            return Err(RegistryError::InvalidEmail.into());
        }
        check_password(password)?;
        let key = normalize_email(email);
        if self.lock().by_email.contains_key(&key) {
            return Err(RegistryError::DuplicateEmail.into());
        }
        let hash = self.hash_credential(email, password)?;
        let mut inner = self.lock();
        if inner.by_email.contains_key(&key) {
            return Err(RegistryError::DuplicateEmail.into());
        }
        let mut rng = rand::rng();
        let id = loop {
            let id = RandomId::generate(&mut rng);
            if !inner.by_id.contains_key(&id) {
                break id;
            }
        };
        let p = Participant::new(id.clone(), email.trim().to_owned(), hash);
        Self::persist(&mut inner, &p)?;
        inner.by_email.insert(key, id.clone());
        inner.by_id.insert(id, p.clone());
        Ok(p)
    }

    /// Checks an email/password pair; returns the participant's id on success.
    pub fn verify(&self, email: &str, password: &str) -> Option<RandomId> {
        let p = {
            let inner = self.lock();
            let id = inner.by_email.get(&normalize_email(email))?;
            inner.by_id.get(id)?.clone()
        };
        let parsed = PasswordHash::new(&p.credential_hash).ok()?;
        Argon2::default()
            .verify_password(&credential_input(email, password), &parsed)
            .is_ok()
            .then_some(p.random_id)
    }

    pub fn get(&self, id: &str) -> Option<Participant> {
        let id = RandomId::try_from(id.to_owned()).ok()?;
        self.lock().by_id.get(&id).cloned()
    }

    pub fn participants(&self) -> Vec<Participant> {
        self.lock().by_id.values().cloned().collect()
    }

    pub fn has_consented(&self, id: &str) -> bool {
        self.get(id).is_some_and(|p| p.has_consented())
    }

    fn update<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Participant) -> Result<T, RegistryError>,
    ) -> Result<(T, Participant), RegistryStoreError> {
        let id = RandomId::try_from(id.to_owned()).map_err(|_| RegistryError::UnknownParticipant)?;
        let mut inner = self.lock();
        let mut p = inner
            .by_id
            .get(&id)
            .cloned()
            .ok_or(RegistryError::UnknownParticipant)?;
        let out = f(&mut p)?;
        Self::persist(&mut inner, &p)?;
        inner.by_id.insert(id, p.clone());
        Ok((out, p))
    }

    pub fn screen(&self, id: &str, answers: &Answers) -> Result<ScreeningVerdict, RegistryStoreError> {
        let rule = self.rule.clone();
        self.update(id, |p| p.screen(answers, &rule)).map(|(v, _)| v)
    }

    pub fn record_consent(
        &self,
        id: &str,
        signature_name: &str,
        document_version: &str,
        now: Timestamp,
    ) -> Result<Participant, RegistryStoreError> {
        self.update(id, |p| p.record_consent(signature_name, document_version, now))
            .map(|(_, p)| p)
    }

    pub fn record_onboarding(&self, id: &str, answers: Answers) -> Result<Participant, RegistryStoreError> {
        self.update(id, |p| p.record_onboarding(answers)).map(|(_, p)| p)
    }

    pub fn register_push_token(&self, id: &str, token: &str) -> Result<Participant, RegistryStoreError> {
        self.update(id, |p| p.register_push_token(token)).map(|(_, p)| p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cheap() -> HashCost {
        HashCost {
            memory_kib: 8,
            iterations: 1,
            parallelism: 1,
        }
    }

    #[test]
    fn survives_reopen_and_keeps_email_unique() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let reg = Registry::open(dir.path(), EligibilityRule::illustrative_default(), cheap()).unwrap();
            let p = reg.register("Ana@Example.org", "correct horse").unwrap();
            assert_eq!(p.random_id.as_str().len(), 22);
            p.random_id
        };
        let reg = Registry::open(dir.path(), EligibilityRule::illustrative_default(), cheap()).unwrap();
        assert!(reg.get(id.as_str()).is_some());
        assert!(matches!(
            reg.register("ana@example.org", "another password"),
            Err(RegistryStoreError::Rule(RegistryError::DuplicateEmail))
        ));
        assert_eq!(reg.verify("ana@example.org", "correct horse"), Some(id));
        assert_eq!(reg.verify("ana@example.org", "wrong horse!"), None);
    }

    #[test]
    fn rejects_bad_input_before_hashing() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path(), EligibilityRule::default(), cheap()).unwrap();
        assert!(matches!(reg.register("nope", "long enough pw"), Err(RegistryStoreError::Rule(RegistryError::InvalidEmail))));
        assert!(matches!(reg.register("a@b.org", "short"), Err(RegistryStoreError::Rule(RegistryError::WeakPassword))));
        assert!(reg.participants().is_empty());
    }
}
