//! Study simulation on a virtual clock.
//!
//! Each participant gets a fresh [`VirtualClock`] and seeded generators, so a
//! run is a pure function of its inputs: the same seed produces the same log
//! and ledger bytes. Sessions run one after another in participant order.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::mock::{audio_stub, MockBackend};
use crate::adapters::{LatencyProfile, StageContext, SttInput};
use crate::clock::{Clock, VirtualClock};
use crate::coordinator::{CoordError, Coordinator, MediationSettings, RunTicket};
use crate::corpus;
use crate::experiment::{
    plan_for, session_log_path, JsonlWriter, PlanError, QuestionnaireItem, ScenarioScript,
    SelfReportItem, TrialLogEntry,
};
use crate::ids::{SessionId, StreamId};
use crate::pipeline::{run_mediation, Backend, PipelineEvent};
use crate::protocol::{ControlAction, Envelope, Message, Role};
use crate::provenance::{ledger_path, Ledger};
use crate::session::{Session, SessionError};
use crate::stats::{summarize, Stats};

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterventionAction {
    /// Pause at a chunk boundary and resume after `hold_ms`.
    Pause { hold_ms: u64 },
    Restart,
}

/// An operator action injected after `after_chunks` chunks of the current
/// run have been dispatched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub participant_index: u32,
    pub trial_index: usize,
    pub after_chunks: usize,
    pub action: InterventionAction,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub participants: u32,
    /// Stop after this many completed trials.
    pub max_runs: Option<usize>,
    pub seed: u64,
    pub profile: LatencyProfile,
    pub settings: MediationSettings,
    pub interventions: Vec<Intervention>,
    /// Send mock audio stubs instead of text, exercising transcription.
    pub audio_input: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            participants: 6,
            max_runs: None,
            seed: 0,
            profile: LatencyProfile::default(),
            settings: MediationSettings::default(),
            interventions: Vec::new(),
            audio_input: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no participants to simulate")]
    NoParticipants,
    #[error("{participants} participants cannot supply {runs} runs")]
    NotEnoughParticipants { participants: u32, runs: usize },
    #[error("invalid latency profile: {0}")]
    Profile(String),
    #[error("participant {participant}: {source}")]
    Plan {
        participant: u32,
        #[source]
        source: PlanError,
    },
    #[error("participant {participant}: {source}")]
    Session {
        participant: u32,
        #[source]
        source: SessionError,
    },
    #[error("participant {participant}, trial {trial}: {source}")]
    Coordinator {
        participant: u32,
        trial: usize,
        #[source]
        source: CoordError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Dispatch record of one run, aborted or not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimRun {
    pub participant_index: u32,
    pub trial_index: usize,
    pub stream_id: StreamId,
    pub aborted: bool,
    pub run_start_ms: u64,
    /// `(seq, send_at_ms)` for every dispatched chunk.
    pub sends: Vec<(u64, u64)>,
    pub pipeline_time_to_first_audio_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub runs: usize,
    pub streaming: bool,
    pub masking_window_ms: u64,
    pub stats: BTreeMap<String, Stats>,
}

impl LatencySummary {
    pub fn of(entries: &[TrialLogEntry], settings: &MediationSettings) -> Self {
        let traces: Vec<_> = entries.iter().map(|e| e.trace).collect();
        Self {
            runs: entries.len(),
            streaming: settings.streaming,
            masking_window_ms: settings.masking_window_ms,
            stats: summarize(&traces),
        }
    }
}

#[derive(Debug)]
pub struct SimOutcome {
    pub sessions: Vec<SessionId>,
    pub entries: Vec<TrialLogEntry>,
    pub runs: Vec<SimRun>,
    pub ledger: Arc<Ledger>,
    pub summary: LatencySummary,
}

fn participant_rng(seed: u64, participant: u32, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(participant) << 8) | stream);
    rng
}

/// Self-report answers drawn uniformly from each item's scale.
pub fn random_self_report(questionnaire: &[QuestionnaireItem], rng: &mut impl Rng) -> Vec<SelfReportItem> {
    questionnaire
        .iter()
        .map(|q| SelfReportItem {
            item_id: q.item_id.clone(),
            construct: q.construct,
            scale_min: q.scale_min,
            scale_max: q.scale_max,
            response: rng.gen_range(q.scale_min..=q.scale_max),
        })
        .collect()
}

fn remove_if_exists(path: &Path) -> Result<(), SimError> {
    match std::fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(source) => Err(SimError::Io {
            path: path.display().to_string(),
            source,
        }),
    }
}

struct Driver<'a> {
    backend: &'a Backend,
    clock: VirtualClock,
    latency_rng: ChaCha8Rng,
}

impl Driver<'_> {
    /// Execute a run to completion on the virtual clock. Returns the run
    /// start time and each chunk's absolute ready time.
    fn execute(&mut self, c: &mut Coordinator, ticket: &RunTicket) -> Result<(u64, Vec<u64>), CoordError> {
        let start = self.clock.now_ms();
        let id = ticket.request.stream_id.clone();
        let mut ready = Vec::new();
        let mut chunk_err = None;
        let mut ctx = StageContext {
            clock: &self.clock,
            rng: &mut self.latency_rng,
        };
        let result = run_mediation(&ticket.request, self.backend, &mut ctx, &ticket.control, &mut |e| match e {
            PipelineEvent::Status {
                stage,
                state,
                elapsed_ms,
            } => c.on_status(&id, stage, state, elapsed_ms),
            PipelineEvent::Modified { text } => c.on_modified(&id, text),
            PipelineEvent::Chunk { chunk, ready_at_ms } => {
                ready.push(start + ready_at_ms);
                if let Err(e) = c.on_chunk(chunk.clone(), start + ready_at_ms) {
                    chunk_err.get_or_insert(e);
                }
            }
        });
        if let Some(e) = chunk_err {
            return Err(e);
        }
        c.run_finished(&id, result)?;
        Ok((start, ready))
    }
}

/// Run the study. With `out_dir`, writes one session log and one ledger
/// file per participant plus `summary.json`.
pub fn simulate(
    scenarios: &[ScenarioScript],
    questionnaire: &[QuestionnaireItem],
    config: &SimConfig,
    out_dir: Option<&Path>,
) -> Result<SimOutcome, SimError> {
    if config.participants == 0 {
        return Err(SimError::NoParticipants);
    }
    if let Some(runs) = config.max_runs {
        if (config.participants as usize) * crate::experiment::CONDITION_COUNT < runs {
            return Err(SimError::NotEnoughParticipants {
                participants: config.participants,
                runs,
            });
        }
    }
    config.profile.validate().map_err(SimError::Profile)?;
    let backend = Backend::mock(MockBackend::new(&config.profile, config.settings.words_per_minute));
    let ledger = Arc::new(match out_dir {
        Some(d) => Ledger::persistent(d),
        None => Ledger::in_memory(),
    });
    let scenario_map: Arc<BTreeMap<_, _>> = Arc::new(
        scenarios
            .iter()
            .map(|s| (s.scenario_id.clone(), s.clone()))
            .collect(),
    );

    let mut sessions = Vec::new();
    let mut entries = Vec::new();
    let mut runs = Vec::new();
    let limit = config.max_runs.unwrap_or(usize::MAX);

    for p in 0..config.participants {
        if entries.len() >= limit {
            break;
        }
        let plan = plan_for(p, scenarios).map_err(|source| SimError::Plan { participant: p, source })?;
        let session_id = SessionId::seeded(config.seed, p);
        let session = Session::new(session_id.clone(), format!("P{p:03}"), plan)
            .map_err(|source| SimError::Session { participant: p, source })?;
        let log = match out_dir {
            Some(d) => {
                let path = session_log_path(d, &session_id);
                remove_if_exists(&path)?;
                remove_if_exists(&ledger_path(d, &session_id))?;
                Some(JsonlWriter::create(path.clone()).map_err(|source| SimError::Io {
                    path: path.display().to_string(),
                    source,
                })?)
            }
            None => None,
        };
        let wrap = |trial: usize| move |source| SimError::Coordinator { participant: p, trial, source };
        let mut c = Coordinator::new(session, scenario_map.clone(), config.settings, ledger.clone(), log)
            .map_err(wrap(0))?;
        let mut driver = Driver {
            backend: &backend,
            clock: VirtualClock::new(),
            latency_rng: participant_rng(config.seed, p, 0),
        };
        let mut content_rng = participant_rng(config.seed, p, 1);
        sessions.push(session_id);

        for trial in 0..crate::experiment::CONDITION_COUNT {
            if entries.len() >= limit {
                break;
            }
            let t_err = wrap(trial);
            let speak = c.start_trial(driver.clock.now_ms()).map_err(t_err)?;
            driver.clock.advance(speak);
            c.agent_spoke().map_err(wrap(trial))?;
            let text = corpus::sentence(&mut content_rng);
            let input = if config.audio_input {
                SttInput::Audio(audio_stub(&text))
            } else {
                SttInput::Text(text)
            };
            let mut ticket = c
                .submit_initial(input, driver.clock.now_ms())
                .map_err(wrap(trial))?;
            let mut pending: Vec<Intervention> = config
                .interventions
                .iter()
                .filter(|i| i.participant_index == p && i.trial_index == trial)
                .copied()
                .collect();
            pending.sort_by_key(|i| i.after_chunks);

            'run: loop {
                let (run_start, ready) = driver.execute(&mut c, &ticket).map_err(wrap(trial))?;
                let n = ready.len();
                let gate = c.settings().buffer_depth.min(n).max(1) - 1;
                let mut t = ready.get(gate).copied().unwrap_or(run_start);
                let mut sends = Vec::new();
                let stream_id = ticket.request.stream_id.clone();
                loop {
                    if pending.first().is_some_and(|i| i.after_chunks == sends.len()) {
                        let iv = pending.remove(0);
                        match iv.action {
                            InterventionAction::Pause { hold_ms } => {
                                c.pause().map_err(wrap(trial))?;
                                t += hold_ms;
                                c.resume().map_err(wrap(trial))?;
                            }
                            InterventionAction::Restart => {
                                runs.push(SimRun {
                                    participant_index: p,
                                    trial_index: trial,
                                    stream_id,
                                    aborted: true,
                                    run_start_ms: run_start,
                                    sends,
                                    pipeline_time_to_first_audio_ms: None,
                                });
                                driver.clock.advance_to(driver.clock.now_ms().max(t));
                                ticket = c.restart().map_err(wrap(trial))?;
                                continue 'run;
                            }
                        }
                        continue;
                    }
                    match c.next_dispatch().map_err(wrap(trial))? {
                        Some(chunk) => {
                            t = t.max(ready[chunk.seq as usize]);
                            sends.push((chunk.seq, t));
                            t += chunk.duration_ms;
                        }
                        None => break,
                    }
                }
                driver.clock.advance_to(driver.clock.now_ms().max(t));
                c.playback_finished(&stream_id).map_err(wrap(trial))?;
                runs.push(SimRun {
                    participant_index: p,
                    trial_index: trial,
                    stream_id,
                    aborted: false,
                    run_start_ms: run_start,
                    sends,
                    pipeline_time_to_first_audio_ms: None,
                });
                break;
            }
            let items = random_self_report(questionnaire, &mut content_rng);
            let entry = c.submit_self_report(items, None).map_err(wrap(trial))?;
            if let Some(last) = runs.last_mut() {
                last.pipeline_time_to_first_audio_ms = Some(entry.trace.time_to_first_audio_ms);
            }
            entries.push(entry);
        }
        c.stop().map_err(wrap(c.session().trial_index()))?;
    }

    let summary = LatencySummary::of(&entries, &config.settings);
    if let Some(d) = out_dir {
        let path = d.join(SUMMARY_FILE);
        let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(SimOutcome {
        sessions,
        entries,
        runs,
        ledger,
        summary,
    })
}

/// One timed client message. `at_ms` is the earliest send time relative to
/// the start of the script; a player also waits until the session is in a
/// state where the message is legal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayStep {
    pub at_ms: u64,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct WireStep {
    at_ms: u64,
    frame: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReplayScript {
    pub steps: Vec<ReplayStep>,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("step {0}: time goes backwards")]
    NonMonotonic(usize),
    #[error("script must start with JoinSession")]
    NoJoin,
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

impl ReplayScript {
    /// A participant script: join, then one utterance and one self-report
    /// per trial, spaced by `gap_ms`. Pass `trials` < 6 to stop early.
    pub fn participant(
        participant_index: u32,
        trials: usize,
        seed: u64,
        questionnaire: &[QuestionnaireItem],
        gap_ms: u64,
    ) -> Self {
        let mut rng = participant_rng(seed, participant_index, 1);
        let mut steps = Vec::new();
        let mut seq = 0;
        let mut at = 0;
        let mut push = |at: u64, message: Message| {
            steps.push(ReplayStep {
                at_ms: at,
                envelope: Envelope::new(None, seq, message),
            });
            seq += 1;
        };
        push(
            at,
            Message::JoinSession {
                role: Role::Participant,
                participant_index: Some(participant_index),
            },
        );
        for _ in 0..trials.min(crate::experiment::CONDITION_COUNT) {
            at += gap_ms;
            push(
                at,
                Message::UserUtterance {
                    text: Some(corpus::sentence(&mut rng)),
                    audio_b64: None,
                    is_final: true,
                },
            );
            at += gap_ms;
            push(
                at,
                Message::SelfReportSubmit {
                    items: random_self_report(questionnaire, &mut rng),
                    free_text: None,
                },
            );
        }
        Self { steps }
    }

    /// Insert an operator-style control step (played by a separate
    /// operator connection).
    pub fn control_step(at_ms: u64, seq: u64, action: ControlAction) -> ReplayStep {
        ReplayStep {
            at_ms,
            envelope: Envelope::new(None, seq, Message::Control { action, autonomy: None }),
        }
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        match self.steps.first() {
            Some(s) if matches!(s.envelope.message, Message::JoinSession { .. }) => {}
            _ => return Err(ReplayError::NoJoin),
        }
        for (i, w) in self.steps.windows(2).enumerate() {
            if w[1].at_ms < w[0].at_ms {
                return Err(ReplayError::NonMonotonic(i + 1));
            }
        }
        Ok(())
    }

    /// One JSON object per line: `{"at_ms": .., "frame": <envelope>}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let frame: serde_json::Value =
                serde_json::from_slice(&crate::protocol::encode(&s.envelope)).expect("valid JSON");
            let line = serde_json::to_string(&WireStep { at_ms: s.at_ms, frame }).expect("serializes");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ReplayError> {
        let mut steps = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parse = |detail: String| ReplayError::Parse { line: i + 1, detail };
            let w: WireStep = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
            let bytes = serde_json::to_vec(&w.frame).expect("value serializes");
            let envelope = crate::protocol::decode(&bytes).map_err(|e| parse(e.to_string()))?;
            steps.push(ReplayStep {
                at_ms: w.at_ms,
                envelope,
            });
        }
        let script = Self { steps };
        script.validate()?;
        Ok(script)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::default_questionnaire;

    fn pool() -> Vec<ScenarioScript> {
        crate::coordinator::tests::scenarios()
    }

    #[test]
    fn full_study_has_36_entries_and_balanced_conditions() {
        let out = simulate(&pool(), &default_questionnaire(), &SimConfig::default(), None).unwrap();
        assert_eq!(out.entries.len(), 36);
        let tally = crate::experiment::condition_tally(&out.entries);
        assert_eq!(tally.len(), 6);
        assert!(tally.values().all(|&n| n == 6));
    }

    #[test]
    fn batch_fixed_profile_mean_is_exact() {
        let mut cfg = SimConfig {
            max_runs: Some(200),
            participants: 34,
            ..Default::default()
        };
        cfg.settings.streaming = false;
        let out = simulate(&pool(), &default_questionnaire(), &cfg, None).unwrap();
        assert_eq!(out.entries.len(), 200);
        assert_eq!(out.summary.stats["end_to_end_ms"].mean, 11600.0);
        assert_eq!(out.summary.stats["time_to_first_audio_ms"].mean, 11600.0);
    }

    #[test]
    fn streaming_first_send_matches_pipeline() {
        let out = simulate(&pool(), &default_questionnaire(), &SimConfig::default(), None).unwrap();
        for r in &out.runs {
            assert_eq!(
                r.sends[0].1 - r.run_start_ms,
                r.pipeline_time_to_first_audio_ms.unwrap()
            );
            assert_eq!(r.pipeline_time_to_first_audio_ms, Some(5600));
        }
    }

    #[test]
    fn runs_limit_needs_participants() {
        let cfg = SimConfig {
            max_runs: Some(200),
            participants: 6,
            ..Default::default()
        };
        assert!(matches!(
            simulate(&pool(), &default_questionnaire(), &cfg, None),
            Err(SimError::NotEnoughParticipants { .. })
        ));
    }

    #[test]
    fn restart_intervention_leaves_one_response() {
        let cfg = SimConfig {
            participants: 1,
            interventions: vec![Intervention {
                participant_index: 0,
                trial_index: 2,
                after_chunks: 1,
                action: InterventionAction::Restart,
            }],
            ..Default::default()
        };
        let out = simulate(&pool(), &default_questionnaire(), &cfg, None).unwrap();
        assert_eq!(out.entries[2].aborted_runs, 1);
        let aborted: Vec<_> = out.runs.iter().filter(|r| r.aborted).collect();
        assert_eq!(aborted.len(), 1);
        assert_eq!(aborted[0].sends.len(), 1);
    }

    #[test]
    fn replay_script_round_trips_as_jsonl() {
        let s = ReplayScript::participant(2, 6, 9, &default_questionnaire(), 100);
        s.validate().unwrap();
        assert_eq!(ReplayScript::from_jsonl(&s.to_jsonl()).unwrap(), s);
        assert_eq!(s.steps.len(), 13);
    }
}
