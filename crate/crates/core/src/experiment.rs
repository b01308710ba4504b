//! The 2×3 within-subjects design: condition enumeration, counterbalanced
//! trial plans, scenario and questionnaire files, self-reports, and the
//! per-session study log.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ProvenanceId, ScenarioId, SessionId, StreamId, UtteranceId};
use crate::pipeline::{LatencyTrace, MediatedResponse};
use crate::session::{Condition, ContentMode, SpeakerOrigin, Utterance, VoiceMode};

/// Number of cells in the voice × content matrix.
pub const CONDITION_COUNT: usize = 6;

/// Canonical order: voice major, content minor.
pub fn enumerate_conditions() -> Vec<Condition> {
    VoiceMode::ALL
        .into_iter()
        .flat_map(|v| ContentMode::ALL.into_iter().map(move |c| Condition::new(v, c)))
        .collect()
}

/// Balanced Latin square for an even number of conditions (Williams design).
///
/// Row 0 is `0, 1, n-1, 2, n-2, ...`; row `r` adds `r` modulo `n`. Every
/// condition appears once per column and every ordered adjacent pair appears
/// exactly once across the rows.
pub fn balanced_latin_square(n: usize) -> Vec<Vec<usize>> {
    assert!(n > 0 && n.is_multiple_of(2), "Williams construction needs an even order");
    let mut first = Vec::with_capacity(n);
    let (mut lo, mut hi) = (1, n - 1);
    first.push(0);
    for j in 1..n {
        if j % 2 == 1 {
            first.push(lo);
            lo += 1;
        } else {
            first.push(hi);
            hi -= 1;
        }
    }
    (0..n)
        .map(|r| first.iter().map(|c| (c + r) % n).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_index: usize,
    pub condition: Condition,
    pub scenario_id: ScenarioId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub participant_index: u32,
    pub trials: Vec<Trial>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("expected {CONDITION_COUNT} trials, got {0}")]
    WrongTrialCount(usize),
    #[error("trial conditions are not a permutation of the condition matrix")]
    NotAPermutation,
    #[error("scenario `{0}` is assigned to more than one trial")]
    DuplicateScenario(ScenarioId),
    #[error("trial at position {position} has trial_index {found}")]
    TrialIndexMismatch { position: usize, found: usize },
    #[error("plan needs at least {CONDITION_COUNT} scenarios, pool has {0}")]
    InsufficientScenarios(usize),
}

impl TrialPlan {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.trials.len() != CONDITION_COUNT {
            return Err(PlanError::WrongTrialCount(self.trials.len()));
        }
        let mut conditions: Vec<Condition> = self.trials.iter().map(|t| t.condition).collect();
        conditions.sort();
        let mut canonical = enumerate_conditions();
        canonical.sort();
        if conditions != canonical {
            return Err(PlanError::NotAPermutation);
        }
        let mut seen = HashSet::new();
        for (position, trial) in self.trials.iter().enumerate() {
            if trial.trial_index != position {
                return Err(PlanError::TrialIndexMismatch {
                    position,
                    found: trial.trial_index,
                });
            }
            if !seen.insert(&trial.scenario_id) {
                return Err(PlanError::DuplicateScenario(trial.scenario_id.clone()));
            }
        }
        Ok(())
    }
}

/// Counterbalanced plan for one participant.
///
/// Condition order is row `participant_index mod 6` of the balanced Latin
/// square over [`enumerate_conditions`]. Scenarios are drawn by a shuffle
/// seeded from the participant index, so pairings vary across participants
/// but are reproducible.
pub fn plan_for(participant_index: u32, pool: &[ScenarioScript]) -> Result<TrialPlan, PlanError> {
    if pool.len() < CONDITION_COUNT {
        return Err(PlanError::InsufficientScenarios(pool.len()));
    }
    let conditions = enumerate_conditions();
    let square = balanced_latin_square(CONDITION_COUNT);
    let row = &square[participant_index as usize % CONDITION_COUNT];

    let mut scenario_ids: Vec<&ScenarioId> = pool.iter().map(|s| &s.scenario_id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ce0_a210 ^ u64::from(participant_index));
    scenario_ids.shuffle(&mut rng);

    let plan = TrialPlan {
        participant_index,
        trials: row
            .iter()
            .zip(scenario_ids)
            .enumerate()
            .map(|(trial_index, (&c, scenario_id))| Trial {
                trial_index,
                condition: conditions[c],
                scenario_id: scenario_id.clone(),
            })
            .collect(),
    };
    plan.validate()?;
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Scenario files

/// Modifier prompt per content mode. All three are required.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplates {
    #[serde(rename = "Repetition")]
    pub repetition: String,
    #[serde(rename = "Enhancement")]
    pub enhancement: String,
    #[serde(rename = "CounteredConclusion")]
    pub countered_conclusion: String,
}

impl PromptTemplates {
    pub fn for_mode(&self, mode: ContentMode) -> &str {
        match mode {
            ContentMode::Repetition => &self.repetition,
            ContentMode::Enhancement => &self.enhancement,
            ContentMode::CounteredConclusion => &self.countered_conclusion,
        }
    }
}

/// A short scripted moral dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub scenario_id: ScenarioId,
    pub title: String,
    pub agent_opening: String,
    pub agent_followup: String,
    pub modifier_prompt_templates: PromptTemplates,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_voice_ref: Option<String>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: parse error: {detail}")]
    Parse { path: String, detail: String },
    #[error("{path}: duplicate scenario_id `{id}`")]
    DuplicateScenarioId { path: String, id: ScenarioId },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn load_scenarios(path: impl AsRef<Path>) -> Result<Vec<ScenarioScript>, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenarios(&text, &path.display().to_string())
}

/// Parse and validate a scenario file body. `origin` labels diagnostics.
pub fn parse_scenarios(text: &str, origin: &str) -> Result<Vec<ScenarioScript>, ScenarioError> {
    let parse = |detail: String| ScenarioError::Parse {
        path: origin.to_owned(),
        detail,
    };
    let pool: Vec<ScenarioScript> = serde_json::from_str(text).map_err(|e| parse(e.to_string()))?;
    let mut seen = HashSet::new();
    for (i, s) in pool.iter().enumerate() {
        for (field, value) in [
            ("scenario_id", s.scenario_id.as_str()),
            ("agent_opening", s.agent_opening.as_str()),
            ("agent_followup", s.agent_followup.as_str()),
            (
                "modifier_prompt_templates.Repetition",
                s.modifier_prompt_templates.repetition.as_str(),
            ),
            (
                "modifier_prompt_templates.Enhancement",
                s.modifier_prompt_templates.enhancement.as_str(),
            ),
            (
                "modifier_prompt_templates.CounteredConclusion",
                s.modifier_prompt_templates.countered_conclusion.as_str(),
            ),
        ] {
            if value.trim().is_empty() {
                return Err(parse(format!("scenario #{i}: field `{field}` must be non-empty")));
            }
        }
        if !seen.insert(s.scenario_id.clone()) {
            return Err(ScenarioError::DuplicateScenarioId {
                path: origin.to_owned(),
                id: s.scenario_id.clone(),
            });
        }
    }
    Ok(pool)
}

// ---------------------------------------------------------------------------
// Questionnaire and self-reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Construct {
    Agency,
    Authorship,
    Other,
}

/// One questionnaire item as configured for the study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionnaireItem {
    pub item_id: String,
    pub construct: Construct,
    pub prompt: String,
    pub scale_min: i32,
    pub scale_max: i32,
}

pub fn parse_questionnaire(text: &str, origin: &str) -> Result<Vec<QuestionnaireItem>, ScenarioError> {
    let parse = |detail: String| ScenarioError::Parse {
        path: origin.to_owned(),
        detail,
    };
    let items: Vec<QuestionnaireItem> =
        serde_json::from_str(text).map_err(|e| parse(e.to_string()))?;
    if items.is_empty() {
        return Err(parse("questionnaire has no items".into()));
    }
    let mut seen = HashSet::new();
    for item in &items {
        if item.item_id.trim().is_empty() {
            return Err(parse("field `item_id` must be non-empty".into()));
        }
        if item.scale_min > item.scale_max {
            return Err(parse(format!(
                "item `{}`: scale_min {} exceeds scale_max {}",
                item.item_id, item.scale_min, item.scale_max
            )));
        }
        if !seen.insert(item.item_id.as_str()) {
            return Err(parse(format!("duplicate item_id `{}`", item.item_id)));
        }
    }
    Ok(items)
}

pub fn load_questionnaire(path: impl AsRef<Path>) -> Result<Vec<QuestionnaireItem>, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_questionnaire(&text, &path.display().to_string())
}

/// Built-in items used when no questionnaire file is configured.
pub fn default_questionnaire() -> Vec<QuestionnaireItem> {
    let item = |id: &str, construct, prompt: &str| QuestionnaireItem {
        item_id: id.to_owned(),
        construct,
        prompt: prompt.to_owned(),
        scale_min: 1,
        scale_max: 7,
    };
    vec![
        item("agency_control", Construct::Agency, "I felt in control of what my avatar said."),
        item("agency_cause", Construct::Agency, "The avatar's reply was caused by me."),
        item("authorship_mine", Construct::Authorship, "The reply expressed my own view."),
        item("authorship_words", Construct::Authorship, "I would call myself the author of the reply."),
        item("voice_self", Construct::Other, "The voice sounded like me."),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfReportItem {
    pub item_id: String,
    pub construct: Construct,
    pub scale_min: i32,
    pub scale_max: i32,
    pub response: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfReport {
    /// Index of the trial the report refers to.
    pub trial_ref: usize,
    pub items: Vec<SelfReportItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_text: Option<String>,
}

impl SelfReport {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.items.is_empty() {
            out.push("self_report.items is empty".to_owned());
        }
        for item in &self.items {
            if item.scale_min > item.scale_max {
                out.push(format!(
                    "self_report item `{}`: scale_min {} > scale_max {}",
                    item.item_id, item.scale_min, item.scale_max
                ));
            } else if !(item.scale_min..=item.scale_max).contains(&item.response) {
                out.push(format!(
                    "self_report item `{}`: response {} outside [{}, {}]",
                    item.item_id, item.response, item.scale_min, item.scale_max
                ));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Study log

/// One completed trial as written to the session log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialLogEntry {
    pub session_id: SessionId,
    pub participant_index: u32,
    pub trial_index: usize,
    pub condition: Condition,
    pub scenario_id: ScenarioId,
    pub initial_utterance_id: UtteranceId,
    pub initial_text: String,
    pub response_utterance_id: UtteranceId,
    pub mediated_text: String,
    pub streaming: bool,
    pub trace: LatencyTrace,
    pub provenance_id: ProvenanceId,
    pub masking_window_ms: u64,
    pub perceived_gap_ms: u64,
    pub aborted_runs: u32,
    pub self_report: SelfReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trial log validation failed: {}", .violations.join("; "))]
pub struct ValidationError {
    pub violations: Vec<String>,
}

/// Everything needed to log one trial beyond the trial and its texts.
#[derive(Debug, Clone)]
pub struct TrialOutcome<'a> {
    pub session_id: &'a SessionId,
    pub participant_index: u32,
    pub masking_window_ms: u64,
    pub aborted_runs: u32,
    pub streaming: bool,
}

/// Validate a completed trial and build its log entry. Every violated
/// invariant is reported, not just the first.
pub fn record_trial(
    trial: &Trial,
    initial_utterance: &Utterance,
    mediated: &MediatedResponse,
    self_report: &SelfReport,
    outcome: &TrialOutcome<'_>,
) -> Result<TrialLogEntry, ValidationError> {
    let mut violations = Vec::new();
    if initial_utterance.origin != SpeakerOrigin::Participant {
        violations.push(format!(
            "initial utterance origin is {:?}, expected Participant",
            initial_utterance.origin
        ));
    }
    if !initial_utterance.is_finalized() {
        violations.push("initial utterance text is empty".to_owned());
    }
    if mediated.response_utterance.origin != SpeakerOrigin::AvatarExtension {
        violations.push(format!(
            "response origin is {:?}, expected AvatarExtension",
            mediated.response_utterance.origin
        ));
    }
    if mediated.modified_text.trim().is_empty() {
        violations.push("mediated text is empty".to_owned());
    }
    if mediated.response_utterance.text != mediated.modified_text {
        violations.push("response utterance text differs from modified text".to_owned());
    }
    if mediated.condition != trial.condition {
        violations.push(format!(
            "response condition {} differs from trial condition {}",
            mediated.condition, trial.condition
        ));
    }
    violations.extend(mediated.trace.violations());
    if self_report.trial_ref != trial.trial_index {
        violations.push(format!(
            "self_report.trial_ref {} does not match trial {}",
            self_report.trial_ref, trial.trial_index
        ));
    }
    violations.extend(self_report.violations());
    if !violations.is_empty() {
        return Err(ValidationError { violations });
    }
    Ok(TrialLogEntry {
        session_id: outcome.session_id.clone(),
        participant_index: outcome.participant_index,
        trial_index: trial.trial_index,
        condition: trial.condition,
        scenario_id: trial.scenario_id.clone(),
        initial_utterance_id: initial_utterance.utterance_id.clone(),
        initial_text: initial_utterance.text.clone(),
        response_utterance_id: mediated.response_utterance.utterance_id.clone(),
        mediated_text: mediated.modified_text.clone(),
        streaming: outcome.streaming,
        trace: mediated.trace,
        provenance_id: mediated.provenance.provenance_id.clone(),
        masking_window_ms: outcome.masking_window_ms,
        perceived_gap_ms: crate::pipeline::compute_perceived_gap(
            &mediated.trace,
            outcome.masking_window_ms,
        ),
        aborted_runs: outcome.aborted_runs,
        self_report: self_report.clone(),
    })
}

/// One line of `<session_id>.log.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    SessionStarted {
        session_id: SessionId,
        participant_index: u32,
        plan: TrialPlan,
    },
    Utterance(Utterance),
    RunCompleted {
        trial_index: usize,
        stream_id: StreamId,
        chunk_count: usize,
        provenance_id: ProvenanceId,
    },
    RunAborted {
        trial_index: usize,
        stream_id: StreamId,
        /// Sequence numbers already played before the abort.
        played: Vec<u64>,
        discarded: usize,
        provenance_id: ProvenanceId,
    },
    Trial(TrialLogEntry),
    SessionStopped {
        completed_trials: usize,
    },
}

/// Append-only line-delimited JSON writer.
#[derive(Debug)]
pub struct JsonlWriter {
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl JsonlWriter {
    pub fn create(path: PathBuf) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Serialize and append one line, flushed before returning.
    pub fn append<T: Serialize>(&self, record: &T) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(record).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let mut out = self.out.lock().unwrap_or_else(|p| p.into_inner());
        out.write_all(&line)?;
        out.flush()
    }
}

pub fn session_log_path(dir: &Path, session: &SessionId) -> PathBuf {
    dir.join(format!("{session}.log.jsonl"))
}

/// Read every record of a session log.
pub fn read_session_log(path: &Path) -> std::io::Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

/// Count of log entries per condition; handy for balance checks.
pub fn condition_tally<'a>(entries: impl IntoIterator<Item = &'a TrialLogEntry>) -> BTreeMap<Condition, usize> {
    let mut tally = BTreeMap::new();
    for e in entries {
        *tally.entry(e.condition).or_insert(0) += 1;
    }
    tally
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_pool(n: usize) -> Vec<ScenarioScript> {
        (0..n)
            .map(|i| ScenarioScript {
                scenario_id: ScenarioId::new(format!("s{i}")),
                title: format!("Scenario {i}"),
                agent_opening: "Would you return the wallet?".into(),
                agent_followup: "Can you tell me more?".into(),
                modifier_prompt_templates: PromptTemplates {
                    repetition: "Repeat.".into(),
                    enhancement: "Strengthen.".into(),
                    countered_conclusion: "Reverse.".into(),
                },
                agent_voice_ref: None,
            })
            .collect()
    }

    #[test]
    fn canonical_condition_order() {
        let c = enumerate_conditions();
        assert_eq!(c.len(), 2 * 3);
        assert_eq!(c[0], Condition::new(VoiceMode::Cloned, ContentMode::Repetition));
        assert_eq!(
            c[5],
            Condition::new(VoiceMode::Robotic, ContentMode::CounteredConclusion)
        );
        let distinct: HashSet<_> = c.iter().collect();
        assert_eq!(distinct.len(), 6);
    }

    #[test]
    fn williams_first_row() {
        assert_eq!(balanced_latin_square(6)[0], vec![0, 1, 5, 2, 4, 3]);
        assert_eq!(balanced_latin_square(2), vec![vec![0, 1], vec![1, 0]]);
    }

    // Exhaustive counts over the square: every value once per column and
    // every ordered adjacent pair once overall.
    #[test]
    fn square_is_balanced_for_even_orders() {
        for n in [2, 4, 6, 8, 10] {
            let sq = balanced_latin_square(n);
            for col in 0..n {
                let mut seen = vec![0; n];
                for row in &sq {
                    seen[row[col]] += 1;
                }
                assert!(seen.iter().all(|&c| c == 1), "n={n} col={col}");
            }
            let mut pairs = vec![vec![0; n]; n];
            for row in &sq {
                for w in row.windows(2) {
                    pairs[w[0]][w[1]] += 1;
                }
            }
            for (a, row) in pairs.iter().enumerate() {
                for (b, &count) in row.iter().enumerate() {
                    assert_eq!(count, usize::from(a != b), "n={n} pair {a}->{b}");
                }
            }
        }
    }

    #[test]
    fn plans_are_permutations_and_deterministic() {
        let pool = sample_pool(8);
        for p in 0..12 {
            let plan = plan_for(p, &pool).unwrap();
            plan.validate().unwrap();
            assert_eq!(plan, plan_for(p, &pool).unwrap());
        }
        let a = plan_for(0, &pool).unwrap();
        let b = plan_for(1, &pool).unwrap();
        let pairing = |p: &TrialPlan| {
            p.trials
                .iter()
                .map(|t| (t.condition, t.scenario_id.clone()))
                .collect::<BTreeMap<_, _>>()
        };
        assert_ne!(pairing(&a), pairing(&b));
    }

    #[test]
    fn plan_needs_six_scenarios() {
        assert_eq!(
            plan_for(0, &sample_pool(5)),
            Err(PlanError::InsufficientScenarios(5))
        );
    }

    #[test]
    fn participant_rows_balance_positions_and_carryover() {
        let pool = sample_pool(6);
        let plans: Vec<_> = (0..6).map(|p| plan_for(p, &pool).unwrap()).collect();
        let mut position: BTreeMap<(usize, Condition), usize> = BTreeMap::new();
        let mut carry: BTreeMap<(Condition, Condition), usize> = BTreeMap::new();
        for plan in &plans {
            for t in &plan.trials {
                *position.entry((t.trial_index, t.condition)).or_default() += 1;
            }
            for w in plan.trials.windows(2) {
                *carry.entry((w[0].condition, w[1].condition)).or_default() += 1;
            }
        }
        assert_eq!(position.len(), 36);
        assert!(position.values().all(|&c| c == 1));
        assert_eq!(carry.len(), 30);
        assert!(carry.values().all(|&c| c == 1));
    }

    #[test]
    fn scenario_missing_template_names_field() {
        let text = r#"[{"scenario_id":"a","title":"t","agent_opening":"o","agent_followup":"f",
            "modifier_prompt_templates":{"Repetition":"r","Enhancement":"e"}}]"#;
        let err = parse_scenarios(text, "inline").unwrap_err().to_string();
        assert!(err.contains("CounteredConclusion"), "{err}");
    }

    #[test]
    fn duplicate_scenario_ids_rejected() {
        let mut pool = sample_pool(2);
        pool[1].scenario_id = pool[0].scenario_id.clone();
        let text = serde_json::to_string(&pool).unwrap();
        assert!(matches!(
            parse_scenarios(&text, "inline"),
            Err(ScenarioError::DuplicateScenarioId { .. })
        ));
    }

    #[test]
    fn empty_scenario_file_is_parse_error() {
        assert!(matches!(
            parse_scenarios("", "inline"),
            Err(ScenarioError::Parse { .. })
        ));
    }

    #[test]
    fn empty_opening_rejected() {
        let mut pool = sample_pool(1);
        pool[0].agent_opening = " ".into();
        let err = parse_scenarios(&serde_json::to_string(&pool).unwrap(), "x")
            .unwrap_err()
            .to_string();
        assert!(err.contains("agent_opening"));
    }

    #[test]
    fn self_report_range_checked() {
        let report = SelfReport {
            trial_ref: 0,
            items: vec![SelfReportItem {
                item_id: "a".into(),
                construct: Construct::Agency,
                scale_min: 1,
                scale_max: 7,
                response: 8,
            }],
            free_text: None,
        };
        assert_eq!(report.violations().len(), 1);
    }

    #[test]
    fn questionnaire_validation() {
        let good = serde_json::to_string(&default_questionnaire()).unwrap();
        assert_eq!(parse_questionnaire(&good, "q").unwrap().len(), 5);
        assert!(parse_questionnaire("[]", "q").is_err());
        let bad = r#"[{"item_id":"a","construct":"Agency","prompt":"p","scale_min":5,"scale_max":1}]"#;
        assert!(parse_questionnaire(bad, "q").is_err());
    }

    #[test]
    fn jsonl_writer_appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.log.jsonl");
        let w = JsonlWriter::create(path.clone()).unwrap();
        w.append(&LogRecord::SessionStopped { completed_trials: 1 }).unwrap();
        w.append(&LogRecord::SessionStopped { completed_trials: 2 }).unwrap();
        let records = read_session_log(&path).unwrap();
        assert_eq!(
            records,
            vec![
                LogRecord::SessionStopped { completed_trials: 1 },
                LogRecord::SessionStopped { completed_trials: 2 }
            ]
        );
    }
}
