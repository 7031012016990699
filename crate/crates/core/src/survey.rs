//! Branching single-choice survey flows.
//!
//! A [`SurveyDefinition`] is an ordered list of [`Question`]s. Every option of
//! a question names the question that follows it, or [`Next::End`]. Question 0
//! is the entry point. A definition is only usable once it has passed
//! [`SurveyDefinition::validate`]; [`Survey`] is the validated, immutable form
//! that sessions and answer checks run against.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::time::Timestamp;

/// Upper bound on the number of paths [`Survey::enumerate_paths`] will materialise.
pub const MAX_ENUMERATED_PATHS: u64 = 1_000_000;

/// Serialized value of [`Next::End`].
pub const END_SENTINEL: i64 = -1;

/// Where an answer leads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Next {
    Question(usize),
    End,
}

impl Next {
    pub fn question(self) -> Option<usize> {
        match self {
            Next::Question(i) => Some(i),
            Next::End => None,
        }
    }

    pub fn is_end(self) -> bool {
        matches!(self, Next::End)
    }
}

impl fmt::Display for Next {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Next::Question(i) => write!(f, "q{i}"),
            Next::End => f.write_str("END"),
        }
    }
}

impl Serialize for Next {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Next::Question(i) => serializer.serialize_u64(*i as u64),
            Next::End => serializer.serialize_i64(END_SENTINEL),
        }
    }
}

impl<'de> Deserialize<'de> for Next {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = i64::deserialize(deserializer)?;
        match raw {
            END_SENTINEL => Ok(Next::End),
            i if i >= 0 => usize::try_from(i)
                .map(Next::Question)
                .map_err(|_| de::Error::custom("question index too large")),
            other => Err(de::Error::invalid_value(
                de::Unexpected::Signed(other),
                &"a question index or -1 for END",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Question {
    pub title: String,
    pub options: Vec<String>,
    pub icons: Vec<String>,
    pub next_question: Vec<Next>,
    /// Key the chosen answer is stored under.
    pub identifier: String,
}

impl Question {
    pub fn option_index(&self, text: &str) -> Option<usize> {
        self.options.iter().position(|o| o == text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DefinitionRef {
    pub survey_id: String,
    pub version: u32,
}

impl fmt::Display for DefinitionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@v{}", self.survey_id, self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SurveyDefinition {
    pub survey_id: String,
    pub version: u32,
    pub questions: Vec<Question>,
}

/// One broken invariant of a definition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Violation {
    /// Offending question, `None` for definition-level problems.
    pub question: Option<usize>,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum ViolationKind {
    EmptyDefinition,
    EmptySurveyId,
    InvalidVersion,
    ArityMismatch {
        options: usize,
        icons: usize,
        next_question: usize,
    },
    TooFewOptions {
        options: usize,
    },
    InvalidIdentifier {
        identifier: String,
    },
    DuplicateIdentifier {
        identifier: String,
        first: usize,
    },
    EmptyOption {
        option: usize,
    },
    /// Answers are stored by text, so option texts must be distinct within a question.
    DuplicateOption {
        option: usize,
        text: String,
    },
    EmptyIcon {
        option: usize,
    },
    NextOutOfRange {
        option: usize,
        target: usize,
    },
    Unreachable,
    Cycle,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(q) = self.question {
            write!(f, "q{q}: ")?;
        }
        match &self.kind {
            ViolationKind::EmptyDefinition => f.write_str("definition has no questions"),
            ViolationKind::EmptySurveyId => f.write_str("surveyId is empty"),
            ViolationKind::InvalidVersion => f.write_str("version must be positive"),
            ViolationKind::ArityMismatch {
                options,
                icons,
                next_question,
            } => write!(
                f,
                "arity mismatch: {options} options, {icons} icons, {next_question} nextQuestion entries"
            ),
            ViolationKind::TooFewOptions { options } => {
                write!(f, "needs at least 2 options, has {options}")
            }
            ViolationKind::InvalidIdentifier { identifier } => write!(
                f,
                "identifier {identifier:?} must be non-empty lowercase letters, digits or hyphens"
            ),
            ViolationKind::DuplicateIdentifier { identifier, first } => {
                write!(f, "identifier {identifier:?} already used by q{first}")
            }
            ViolationKind::EmptyOption { option } => write!(f, "option {option} has empty text"),
            ViolationKind::DuplicateOption { option, text } => {
                write!(f, "option {option} repeats text {text:?}")
            }
            ViolationKind::EmptyIcon { option } => write!(f, "option {option} has empty icon name"),
            ViolationKind::NextOutOfRange { option, target } => {
                write!(f, "option {option} points to missing question {target}")
            }
            ViolationKind::Unreachable => f.write_str("unreachable from q0"),
            ViolationKind::Cycle => f.write_str("lies on a cycle"),
        }
    }
}

/// Result of [`SurveyDefinition::validate`]; empty iff the definition is valid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn unreachable(&self) -> BTreeSet<usize> {
        self.violations
            .iter()
            .filter(|v| v.kind == ViolationKind::Unreachable)
            .filter_map(|v| v.question)
            .collect()
    }

    fn push(&mut self, question: Option<usize>, kind: ViolationKind) {
        self.violations.push(Violation { question, kind });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

pub fn is_valid_identifier(identifier: &str) -> bool {
    !identifier.is_empty()
        && identifier
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

impl SurveyDefinition {
    pub fn definition_ref(&self) -> DefinitionRef {
        DefinitionRef {
            survey_id: self.survey_id.clone(),
            version: self.version,
        }
    }

    /// Successor lists restricted to in-range targets.
    fn edges(&self) -> Vec<Vec<usize>> {
        let n = self.questions.len();
        self.questions
            .iter()
            .map(|q| {
                let mut out: Vec<usize> = q
                    .next_question
                    .iter()
                    .filter_map(|t| t.question())
                    .filter(|&t| t < n)
                    .collect();
                out.sort_unstable();
                out.dedup();
                out
            })
            .collect()
    }

    /// Questions reachable from the entry question by following answer links.
    pub fn reachable(&self) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        if self.questions.is_empty() {
            return seen;
        }
        let edges = self.edges();
        let mut queue = VecDeque::from([0usize]);
        seen.insert(0);
        while let Some(q) = queue.pop_front() {
            for &t in &edges[q] {
                if seen.insert(t) {
                    queue.push_back(t);
                }
            }
        }
        seen
    }

    /// Questions that can reach themselves again.
    fn on_cycle(&self) -> BTreeSet<usize> {
        let edges = self.edges();
        let n = edges.len();
        let mut cyclic = BTreeSet::new();
        for start in 0..n {
            let mut seen = vec![false; n];
            let mut stack: Vec<usize> = edges[start].clone();
            while let Some(q) = stack.pop() {
                if q == start {
                    cyclic.insert(start);
                    break;
                }
                if !core::mem::replace(&mut seen[q], true) {
                    stack.extend_from_slice(&edges[q]);
                }
            }
        }
        cyclic
    }

    /// Lists every violated invariant. Violations are data: an invalid
    /// definition is not an error here.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.survey_id.trim().is_empty() {
            report.push(None, ViolationKind::EmptySurveyId);
        }
        if self.version == 0 {
            report.push(None, ViolationKind::InvalidVersion);
        }
        if self.questions.is_empty() {
            report.push(None, ViolationKind::EmptyDefinition);
            return report;
        }

        let n = self.questions.len();
        let mut first_use: BTreeMap<&str, usize> = BTreeMap::new();
        for (qi, q) in self.questions.iter().enumerate() {
            let here = Some(qi);
            if q.options.len() != q.icons.len() || q.options.len() != q.next_question.len() {
                report.push(
                    here,
                    ViolationKind::ArityMismatch {
                        options: q.options.len(),
                        icons: q.icons.len(),
                        next_question: q.next_question.len(),
                    },
                );
            }
            if q.options.len() < 2 {
                report.push(
                    here,
                    ViolationKind::TooFewOptions {
                        options: q.options.len(),
                    },
                );
            }
            if !is_valid_identifier(&q.identifier) {
                report.push(
                    here,
                    ViolationKind::InvalidIdentifier {
                        identifier: q.identifier.clone(),
                    },
                );
            }
            match first_use.get(q.identifier.as_str()) {
                Some(&first) => report.push(
                    here,
                    ViolationKind::DuplicateIdentifier {
                        identifier: q.identifier.clone(),
                        first,
                    },
                ),
                None => {
                    first_use.insert(&q.identifier, qi);
                }
            }
            for (oi, text) in q.options.iter().enumerate() {
                if text.trim().is_empty() {
                    report.push(here, ViolationKind::EmptyOption { option: oi });
                } else if q.options[..oi].contains(text) {
                    report.push(
                        here,
                        ViolationKind::DuplicateOption {
                            option: oi,
                            text: text.clone(),
                        },
                    );
                }
            }
            for (oi, icon) in q.icons.iter().enumerate() {
                if icon.trim().is_empty() {
                    report.push(here, ViolationKind::EmptyIcon { option: oi });
                }
            }
            for (oi, target) in q.next_question.iter().enumerate() {
                if let Next::Question(t) = *target {
                    if t >= n {
                        report.push(here, ViolationKind::NextOutOfRange { option: oi, target: t });
                    }
                }
            }
        }

        let reachable = self.reachable();
        for qi in (0..n).filter(|q| !reachable.contains(q)) {
            report.push(Some(qi), ViolationKind::Unreachable);
        }
        for qi in self.on_cycle() {
            report.push(Some(qi), ViolationKind::Cycle);
        }
        report
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid survey definition ({} violations)", report.violations.len())]
pub struct InvalidDefinition {
    pub report: ValidationReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error(transparent)]
    InvalidDefinition(#[from] InvalidDefinition),
    #[error("session is not active")]
    SessionNotActive,
    #[error("session was aborted")]
    SessionAborted,
    #[error("option {option} out of range for a question with {options} options")]
    OptionOutOfRange { option: usize, options: usize },
    #[error("session belongs to {session}, not {survey}")]
    DefinitionMismatch {
        session: DefinitionRef,
        survey: DefinitionRef,
    },
    #[error("answer stack entry {position} does not follow the flow")]
    ReplayDiverged { position: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error(transparent)]
    InvalidDefinition(#[from] InvalidDefinition),
    #[error("more than {MAX_ENUMERATED_PATHS} paths ({count})")]
    PathExplosion { count: u64 },
}

/// A definition that passed validation. Cheap to share by reference across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Survey {
    definition: SurveyDefinition,
    index_of: BTreeMap<String, usize>,
}

impl TryFrom<SurveyDefinition> for Survey {
    type Error = InvalidDefinition;

    fn try_from(definition: SurveyDefinition) -> Result<Self, Self::Error> {
        Survey::new(definition)
    }
}

impl Survey {
    pub fn new(definition: SurveyDefinition) -> Result<Self, InvalidDefinition> {
        let report = definition.validate();
        if !report.is_valid() {
            return Err(InvalidDefinition { report });
        }
        let index_of = definition
            .questions
            .iter()
            .enumerate()
            .map(|(i, q)| (q.identifier.clone(), i))
            .collect();
        Ok(Survey {
            definition,
            index_of,
        })
    }

    pub fn definition(&self) -> &SurveyDefinition {
        &self.definition
    }

    pub fn into_definition(self) -> SurveyDefinition {
        self.definition
    }

    pub fn survey_id(&self) -> &str {
        &self.definition.survey_id
    }

    pub fn version(&self) -> u32 {
        self.definition.version
    }

    pub fn definition_ref(&self) -> DefinitionRef {
        self.definition.definition_ref()
    }

    pub fn questions(&self) -> &[Question] {
        &self.definition.questions
    }

    pub fn question(&self, index: usize) -> Option<&Question> {
        self.definition.questions.get(index)
    }

    pub fn index_of(&self, identifier: &str) -> Option<usize> {
        self.index_of.get(identifier).copied()
    }

    /// Question identifiers in definition order.
    pub fn identifiers(&self) -> impl Iterator<Item = &str> {
        self.definition.questions.iter().map(|q| q.identifier.as_str())
    }

    pub fn start_session(&self, now: Timestamp) -> SurveySession {
        SurveySession {
            definition_ref: self.definition_ref(),
            current: Next::Question(0),
            answer_stack: Vec::new(),
            started_at: now,
            status: SessionStatus::Active,
        }
    }

    /// Rebuilds a session by stepping through `stack` from the entry question.
    pub fn replay(
        &self,
        started_at: Timestamp,
        stack: &[AnswerEntry],
    ) -> Result<SurveySession, SessionError> {
        let mut session = self.start_session(started_at);
        for (position, entry) in stack.iter().enumerate() {
            let expected = session
                .current
                .question()
                .and_then(|q| self.question(q))
                .map(|q| q.identifier.as_str());
            if expected != Some(entry.identifier.as_str()) {
                return Err(SessionError::ReplayDiverged { position });
            }
            session.step(self, entry.option_index)?;
        }
        Ok(session)
    }

    /// Number of root-to-END paths, saturating at `u64::MAX`.
    pub fn path_count(&self) -> u64 {
        let n = self.definition.questions.len();
        let mut memo: Vec<Option<u64>> = vec![None; n];
        // Reverse topological order via DFS post-order keeps this iterative.
        for q in self.topological_order().into_iter().rev() {
            let total = self.definition.questions[q]
                .next_question
                .iter()
                .map(|t| match t {
                    Next::End => 1,
                    Next::Question(t) => memo[*t].unwrap_or(0),
                })
                .fold(0u64, u64::saturating_add);
            memo[q] = Some(total);
        }
        memo.first().copied().flatten().unwrap_or(0)
    }

    /// Longest root-to-END path, counted in questions answered.
    pub fn max_path_len(&self) -> usize {
        let n = self.definition.questions.len();
        let mut depth = vec![0usize; n];
        for q in self.topological_order().into_iter().rev() {
            depth[q] = 1 + self.definition.questions[q]
                .next_question
                .iter()
                .map(|t| t.question().map_or(0, |t| depth[t]))
                .max()
                .unwrap_or(0);
        }
        depth.first().copied().unwrap_or(0)
    }

    fn topological_order(&self) -> Vec<usize> {
        let edges = self.definition.edges();
        let n = edges.len();
        let mut indegree = vec![0usize; n];
        for out in &edges {
            for &t in out {
                indegree[t] += 1;
            }
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&q| indegree[q] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(q) = queue.pop_front() {
            order.push(q);
            for &t in &edges[q] {
                indegree[t] -= 1;
                if indegree[t] == 0 {
                    queue.push_back(t);
                }
            }
        }
        order
    }

    /// Every distinct option-index sequence leading from q0 to END.
    pub fn enumerate_paths(&self) -> Result<Vec<Vec<usize>>, PathError> {
        let count = self.path_count();
        if count > MAX_ENUMERATED_PATHS {
            return Err(PathError::PathExplosion { count });
        }
        let mut paths = Vec::with_capacity(count as usize);
        let mut prefix = Vec::new();
        self.collect_paths(0, &mut prefix, &mut paths);
        Ok(paths)
    }

    fn collect_paths(&self, q: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        for (oi, target) in self.definition.questions[q].next_question.iter().enumerate() {
            prefix.push(oi);
            match *target {
                Next::End => out.push(prefix.clone()),
                Next::Question(t) => self.collect_paths(t, prefix, out),
            }
            prefix.pop();
        }
    }

    /// Answer map (identifier to option text) produced by an option-index path.
    pub fn answers_for_path(&self, path: &[usize]) -> Option<BTreeMap<String, String>> {
        let mut answers = BTreeMap::new();
        let mut current = Next::Question(0);
        for &oi in path {
            let q = self.question(current.question()?)?;
            answers.insert(q.identifier.clone(), q.options.get(oi)?.clone());
            current = q.next_question[oi];
        }
        current.is_end().then_some(answers)
    }

    /// Checks that an unordered answer map is exactly one root-to-END path.
    /// Returns the traversal in flow order.
    pub fn trace_answers(
        &self,
        answers: &BTreeMap<String, String>,
    ) -> Result<Vec<AnswerEntry>, Vec<AnswerViolation>> {
        let mut problems = Vec::new();
        let mut trail = Vec::new();
        let mut visited = BTreeSet::new();
        let mut current = Next::Question(0);
        while let Next::Question(qi) = current {
            let q = &self.definition.questions[qi];
            visited.insert(q.identifier.as_str());
            let Some(text) = answers.get(&q.identifier) else {
                problems.push(AnswerViolation::MissingAnswer {
                    identifier: q.identifier.clone(),
                });
                break;
            };
            let Some(oi) = q.option_index(text) else {
                problems.push(AnswerViolation::UnknownOption {
                    identifier: q.identifier.clone(),
                    option: text.clone(),
                });
                break;
            };
            trail.push(AnswerEntry {
                identifier: q.identifier.clone(),
                option_index: oi,
            });
            current = q.next_question[oi];
        }
        for key in answers.keys() {
            if visited.contains(key.as_str()) {
                continue;
            }
            problems.push(if self.index_of.contains_key(key) {
                AnswerViolation::OffPathAnswer {
                    identifier: key.clone(),
                }
            } else {
                AnswerViolation::UnknownIdentifier {
                    identifier: key.clone(),
                }
            });
        }
        if problems.is_empty() {
            Ok(trail)
        } else {
            Err(problems)
        }
    }
}

/// Validates `definition` and opens a session at q0.
pub fn start_session(
    definition: &SurveyDefinition,
    now: Timestamp,
) -> Result<SurveySession, SessionError> {
    let survey = Survey::new(definition.clone())?;
    Ok(survey.start_session(now))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "code", rename_all = "camelCase")]
pub enum AnswerViolation {
    MissingAnswer { identifier: String },
    UnknownIdentifier { identifier: String },
    UnknownOption { identifier: String, option: String },
    /// Known question that the chosen answers never lead to.
    OffPathAnswer { identifier: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SessionStatus {
    Active,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AnswerEntry {
    pub identifier: String,
    pub option_index: usize,
}

/// A participant's traversal of one survey.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SurveySession {
    pub definition_ref: DefinitionRef,
    #[serde(rename = "currentIndex")]
    pub current: Next,
    pub answer_stack: Vec<AnswerEntry>,
    pub started_at: Timestamp,
    pub status: SessionStatus,
}

impl SurveySession {
    fn check_survey(&self, survey: &Survey) -> Result<(), SessionError> {
        if self.definition_ref.survey_id != survey.survey_id()
            || self.definition_ref.version != survey.version()
        {
            return Err(SessionError::DefinitionMismatch {
                session: self.definition_ref.clone(),
                survey: survey.definition_ref(),
            });
        }
        Ok(())
    }

    pub fn current_question<'s>(&self, survey: &'s Survey) -> Option<&'s Question> {
        self.current.question().and_then(|q| survey.question(q))
    }

    /// Answers the current question. On error the session is unchanged.
    pub fn step(&mut self, survey: &Survey, option: usize) -> Result<(), SessionError> {
        self.check_survey(survey)?;
        if self.status != SessionStatus::Active {
            return Err(SessionError::SessionNotActive);
        }
        let q = self
            .current_question(survey)
            .ok_or(SessionError::SessionNotActive)?;
        if option >= q.options.len() {
            return Err(SessionError::OptionOutOfRange {
                option,
                options: q.options.len(),
            });
        }
        self.answer_stack.push(AnswerEntry {
            identifier: q.identifier.clone(),
            option_index: option,
        });
        self.current = q.next_question[option];
        if self.current.is_end() {
            self.status = SessionStatus::Completed;
        }
        Ok(())
    }

    /// Undoes the last answer. A completed session becomes active again; a
    /// session with nothing answered is left as is.
    pub fn back(&mut self, survey: &Survey) -> Result<(), SessionError> {
        self.check_survey(survey)?;
        if self.status == SessionStatus::Aborted {
            return Err(SessionError::SessionAborted);
        }
        if let Some(last) = self.answer_stack.pop() {
            let Some(q) = survey.index_of(&last.identifier) else {
                self.answer_stack.push(last);
                return Err(SessionError::ReplayDiverged {
                    position: self.answer_stack.len() - 1,
                });
            };
            self.current = Next::Question(q);
            self.status = SessionStatus::Active;
        }
        Ok(())
    }

    /// Discards the survey. The answer stack is kept for audit.
    pub fn abort(&mut self) -> Result<(), SessionError> {
        if self.status != SessionStatus::Active {
            return Err(SessionError::SessionNotActive);
        }
        self.status = SessionStatus::Aborted;
        Ok(())
    }

    /// Answers keyed by question identifier, as submitted to the ingestion API.
    pub fn answers(&self, survey: &Survey) -> BTreeMap<String, String> {
        self.answer_stack
            .iter()
            .filter_map(|e| {
                let q = survey.question(survey.index_of(&e.identifier)?)?;
                Some((e.identifier.clone(), q.options.get(e.option_index)?.clone()))
            })
            .collect()
    }
}
