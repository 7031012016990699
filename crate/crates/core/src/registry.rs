//! Participant lifecycle: screening, consent, onboarding and push tokens.
//!
//! A participant moves `pending → eligible | ineligible → consented →
//! onboarded`. Only the random id ever leaves the registry; responses and
//! dispatch logs reference nothing else.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::time::Timestamp;

pub const RANDOM_ID_LEN: usize = 22;
pub const MIN_PASSWORD_CHARS: usize = 10;

const BASE62: &[u8; 62] = b"0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";

/// 128 random bits, base62, left-padded to 22 characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RandomId(String);

impl RandomId {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 16];
        rng.fill_bytes(&mut bytes);
        Self::from_u128(u128::from_le_bytes(bytes))
    }

    pub fn from_u128(mut value: u128) -> Self {
        let mut out = [b'0'; RANDOM_ID_LEN];
        for slot in out.iter_mut().rev() {
            *slot = BASE62[(value % 62) as usize];
            value /= 62;
        }
        RandomId(out.iter().map(|&b| b as char).collect())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for RandomId {
    type Error = RegistryError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s.len() == RANDOM_ID_LEN && s.bytes().all(|b| b.is_ascii_alphanumeric()) {
            Ok(RandomId(s))
        } else {
            Err(RegistryError::InvalidId)
        }
    }
}

impl From<RandomId> for String {
    fn from(id: RandomId) -> String {
        id.0
    }
}

impl fmt::Display for RandomId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("malformed participant id")]
    InvalidId,
    #[error("email is not syntactically valid")]
    InvalidEmail,
    #[error("email already registered")]
    DuplicateEmail,
    #[error("password must be at least {MIN_PASSWORD_CHARS} characters")]
    WeakPassword,
    #[error("participant was already screened")]
    AlreadyScreened,
    #[error("participant is not eligible")]
    NotEligible,
    #[error("consent already recorded")]
    AlreadyConsented,
    #[error("consent has not been recorded")]
    NoConsent,
    #[error("unknown participant")]
    UnknownParticipant,
}

/// Loose syntactic check: one `@`, non-empty local part, dotted domain, no spaces.
pub fn is_valid_email(email: &str) -> bool {
    let mut parts = email.split('@');
    let (Some(local), Some(domain), None) = (parts.next(), parts.next(), parts.next()) else {
        return false;
    };
    !local.is_empty()
        && !email.chars().any(char::is_whitespace)
        && domain.split('.').count() >= 2
        && domain.split('.').all(|label| !label.is_empty())
}

pub fn check_password(password: &str) -> Result<(), RegistryError> {
    if password.chars().count() < MIN_PASSWORD_CHARS {
        Err(RegistryError::WeakPassword)
    } else {
        Ok(())
    }
}

/// Screening and onboarding answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnswerValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl fmt::Display for AnswerValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerValue::Bool(b) => write!(f, "{b}"),
            AnswerValue::Number(n) => write!(f, "{n}"),
            AnswerValue::Text(t) => f.write_str(t),
        }
    }
}

pub type Answers = BTreeMap<String, AnswerValue>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Comparator {
    fn symbol(self) -> &'static str {
        match self {
            Comparator::Eq => "==",
            Comparator::Ne => "!=",
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
        }
    }

    fn holds(self, ordering: core::cmp::Ordering) -> bool {
        use core::cmp::Ordering::*;
        match self {
            Comparator::Eq => ordering == Equal,
            Comparator::Ne => ordering != Equal,
            Comparator::Lt => ordering == Less,
            Comparator::Le => ordering != Greater,
            Comparator::Gt => ordering == Greater,
            Comparator::Ge => ordering != Less,
        }
    }
}

/// `field comparator value`, e.g. `age >= 21`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub field: String,
    pub comparator: Comparator,
    pub value: AnswerValue,
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.field, self.comparator.symbol(), self.value)
    }
}

impl Predicate {
    /// Total over all answer sets: a missing field, a type mismatch or an
    /// incomparable number evaluates to `false`.
    pub fn evaluate(&self, answers: &Answers) -> bool {
        let Some(given) = answers.get(&self.field) else {
            return false;
        };
        let ordering = match (given, &self.value) {
            (AnswerValue::Number(a), AnswerValue::Number(b)) => a.partial_cmp(b),
            (AnswerValue::Text(a), AnswerValue::Text(b)) => Some(a.cmp(b)),
            (AnswerValue::Bool(a), AnswerValue::Bool(b)) => {
                matches!(self.comparator, Comparator::Eq | Comparator::Ne).then(|| a.cmp(b))
            }
            _ => None,
        };
        ordering.is_some_and(|o| self.comparator.holds(o))
    }
}

/// All predicates must pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EligibilityRule {
    pub predicates: Vec<Predicate>,
}

impl EligibilityRule {
    /// Shipped illustrative default: adult and owns a compatible watch.
    pub fn illustrative_default() -> Self {
        EligibilityRule {
            predicates: alloc::vec![
                Predicate {
                    field: "age".into(),
                    comparator: Comparator::Ge,
                    value: AnswerValue::Number(21.0),
                },
                Predicate {
                    field: "owns-compatible-watch".into(),
                    comparator: Comparator::Eq,
                    value: AnswerValue::Bool(true),
                },
            ],
        }
    }

    pub fn failing(&self, answers: &Answers) -> Vec<Predicate> {
        self.predicates
            .iter()
            .filter(|p| !p.evaluate(answers))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Eligibility {
    Pending,
    Eligible,
    Ineligible,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ScreeningVerdict {
    pub eligibility: Eligibility,
    pub failing: Vec<Predicate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Consent {
    pub signed_at: Timestamp,
    pub document_version: String,
    pub signature_name: String,
}

/// Lifecycle position; never decreases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum Stage {
    Pending,
    Ineligible,
    Eligible,
    Consented,
    Onboarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Participant {
    pub random_id: RandomId,
    /// Registry-only; never copied into any data stream.
    pub email: String,
    pub credential_hash: String,
    pub eligibility: Eligibility,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consent: Option<Consent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onboarding: Option<Answers>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub push_token: Option<String>,
}

impl Participant {
    pub fn new(random_id: RandomId, email: String, credential_hash: String) -> Self {
        Participant {
            random_id,
            email,
            credential_hash,
            eligibility: Eligibility::Pending,
            consent: None,
            onboarding: None,
            push_token: None,
        }
    }

    pub fn stage(&self) -> Stage {
        match (self.eligibility, &self.consent, &self.onboarding) {
            (Eligibility::Pending, ..) => Stage::Pending,
            (Eligibility::Ineligible, ..) => Stage::Ineligible,
            (Eligibility::Eligible, None, _) => Stage::Eligible,
            (Eligibility::Eligible, Some(_), None) => Stage::Consented,
            (Eligibility::Eligible, Some(_), Some(_)) => Stage::Onboarded,
        }
    }

    pub fn has_consented(&self) -> bool {
        self.consent.is_some()
    }

    pub fn screen(
        &mut self,
        answers: &Answers,
        rule: &EligibilityRule,
    ) -> Result<ScreeningVerdict, RegistryError> {
        if self.eligibility != Eligibility::Pending {
            return Err(RegistryError::AlreadyScreened);
        }
        let failing = rule.failing(answers);
        self.eligibility = if failing.is_empty() {
            Eligibility::Eligible
        } else {
            Eligibility::Ineligible
        };
        Ok(ScreeningVerdict {
            eligibility: self.eligibility,
            failing,
        })
    }

    pub fn record_consent(
        &mut self,
        signature_name: &str,
        document_version: &str,
        now: Timestamp,
    ) -> Result<(), RegistryError> {
        if self.eligibility != Eligibility::Eligible {
            return Err(RegistryError::NotEligible);
        }
        if self.consent.is_some() {
            return Err(RegistryError::AlreadyConsented);
        }
        self.consent = Some(Consent {
            signed_at: now,
            document_version: document_version.into(),
            signature_name: signature_name.into(),
        });
        Ok(())
    }

    pub fn record_onboarding(&mut self, answers: Answers) -> Result<(), RegistryError> {
        if self.consent.is_none() {
            return Err(RegistryError::NoConsent);
        }
        self.onboarding = Some(answers);
        Ok(())
    }

    /// Replaces any previous token.
    pub fn register_push_token(&mut self, token: &str) -> Result<(), RegistryError> {
        if self.consent.is_none() {
            return Err(RegistryError::NoConsent);
        }
        self.push_token = Some(token.into());
        Ok(())
    }

    /// Participant-facing copy of the signed consent, ending in a SHA-256 of
    /// the lines above it.
    pub fn consent_receipt(&self) -> Option<String> {
        let consent = self.consent.as_ref()?;
        let body = format!(
            "CONSENT RECEIPT\nparticipant: {}\nsigned-by: {}\nsigned-at: {}\ndocument-version: {}\n",
            self.random_id, consent.signature_name, consent.signed_at, consent.document_version
        );
        let digest = Sha256::digest(body.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        Some(format!("{body}content-sha256: {hex}\n"))
    }
}
