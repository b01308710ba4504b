//! Trial flow for one session, independent of how time passes.
//!
//! The virtual-clock simulator calls these methods in sequence; the gateway
//! calls them from connection, pipeline and pacer threads under one lock per
//! session. Every call that changes what a client should see pushes
//! [`Notice`]s, which the caller drains with [`Coordinator::take_notices`].
//!
//! A run is settled when its audio has played out or it has been replaced by
//! a restart. Only then is its provenance record appended, flagged aborted in
//! the second case.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::mock::speech_duration_ms;
use crate::adapters::{AudioChunk, Stage, SttInput};
use crate::config::ServiceConfig;
use crate::experiment::{
    record_trial, JsonlWriter, LogRecord, ScenarioScript, SelfReport, SelfReportItem, Trial,
    TrialLogEntry, TrialOutcome, ValidationError,
};
use crate::ids::{ProvenanceId, ScenarioId, StreamId, UtteranceId};
use crate::pipeline::{
    compute_perceived_gap, MediatedResponse, MediationError, MediationRequest, RunControl, StageState,
};
use crate::protocol::{ErrorCode, Message};
use crate::provenance::{Ledger, LedgerError, ProvenanceRecord};
use crate::scheduler::{Hold, OutboundStream, SchedulerError, SharedStream, StreamState};
use crate::session::{
    AutonomyLevel, Session, SessionError, SessionEvent, SessionState, SpeakerOrigin, Utterance,
    VoiceMode,
};

/// Pipeline and playback knobs that apply to every run of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediationSettings {
    pub streaming: bool,
    pub chunk_ms: u64,
    pub buffer_depth: usize,
    pub masking_window_ms: u64,
    pub words_per_minute: u32,
}

impl MediationSettings {
    pub fn from_config(config: &ServiceConfig) -> Self {
        Self {
            streaming: config.pipeline.streaming,
            chunk_ms: config.pipeline.chunk_ms,
            buffer_depth: config.pipeline.buffer_depth,
            masking_window_ms: config.pipeline.masking_window_ms,
            words_per_minute: config.adapters.words_per_minute,
        }
    }
}

impl Default for MediationSettings {
    fn default() -> Self {
        Self::from_config(&ServiceConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Audience {
    /// Every connection attached to the session.
    All,
    /// Operator and observer connections only.
    Staff,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notice {
    pub audience: Audience,
    pub message: Message,
}

#[derive(Debug, Error)]
pub enum CoordError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("no mediation is active")]
    NoActiveMediation,
    #[error(transparent)]
    Stream(#[from] SchedulerError),
    #[error("stream `{0}` is not the active stream")]
    UnknownStream(StreamId),
    #[error("stream `{0}` is not awaiting preview release")]
    NotPreviewing(StreamId),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("trial plan references unknown scenario `{0}`")]
    UnknownScenario(ScenarioId),
    #[error("mediation failed: {0}")]
    Mediation(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("session log: {0}")]
    Io(#[from] std::io::Error),
}

impl CoordError {
    pub fn code(&self) -> ErrorCode {
        match self {
            CoordError::Session(_) => ErrorCode::IllegalTransition,
            CoordError::NoActiveMediation => ErrorCode::NoActiveMediation,
            CoordError::Stream(_) | CoordError::UnknownStream(_) | CoordError::NotPreviewing(_) => {
                ErrorCode::InvalidStreamState
            }
            CoordError::Mediation(_) => ErrorCode::StageFailure,
            CoordError::Validation(_)
            | CoordError::UnknownScenario(_)
            | CoordError::Ledger(_)
            | CoordError::Io(_) => ErrorCode::ValidationFailed,
        }
    }
}

/// What a driver needs to execute a run.
#[derive(Debug, Clone)]
pub struct RunTicket {
    pub request: MediationRequest,
    pub control: RunControl,
    pub stream: SharedStream,
}

#[derive(Debug)]
struct ActiveRun {
    stream_id: StreamId,
    provenance_id: ProvenanceId,
    control: RunControl,
    stream: SharedStream,
    result: Option<MediatedResponse>,
    dispatched: usize,
    playback_done: bool,
}

pub struct Coordinator {
    session: Session,
    scenarios: Arc<BTreeMap<ScenarioId, ScenarioScript>>,
    settings: MediationSettings,
    ledger: Arc<Ledger>,
    log: Option<JsonlWriter>,
    input: Option<SttInput>,
    run: Option<ActiveRun>,
    /// Cancelled runs whose pipeline has not returned yet.
    aborting: BTreeSet<StreamId>,
    completed: Option<MediatedResponse>,
    aborted_runs: u32,
    stopped: bool,
    notices: Vec<Notice>,
}

impl std::fmt::Debug for Coordinator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Coordinator")
            .field("session", &self.session.id())
            .field("state", &self.session.state())
            .field("trial", &self.session.trial_index())
            .finish_non_exhaustive()
    }
}

impl Coordinator {
    pub fn new(
        session: Session,
        scenarios: Arc<BTreeMap<ScenarioId, ScenarioScript>>,
        settings: MediationSettings,
        ledger: Arc<Ledger>,
        log: Option<JsonlWriter>,
    ) -> Result<Self, CoordError> {
        if let Some(t) = session
            .plan()
            .trials
            .iter()
            .find(|t| !scenarios.contains_key(&t.scenario_id))
        {
            return Err(CoordError::UnknownScenario(t.scenario_id.clone()));
        }
        let c = Self {
            session,
            scenarios,
            settings,
            ledger,
            log,
            input: None,
            run: None,
            aborting: BTreeSet::new(),
            completed: None,
            aborted_runs: 0,
            stopped: false,
            notices: Vec::new(),
        };
        c.write_log(&LogRecord::SessionStarted {
            session_id: c.session.id().clone(),
            participant_index: c.session.plan().participant_index,
            plan: c.session.plan().clone(),
        })?;
        Ok(c)
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn settings(&self) -> &MediationSettings {
        &self.settings
    }

    pub fn trial(&self) -> &Trial {
        &self.session.plan().trials[self.session.trial_index()]
    }

    pub fn scenario(&self) -> &ScenarioScript {
        &self.scenarios[&self.trial().scenario_id]
    }

    pub fn aborted_runs(&self) -> u32 {
        self.aborted_runs
    }

    pub fn active_stream(&self) -> Option<(&StreamId, &SharedStream)> {
        self.run.as_ref().map(|r| (&r.stream_id, &r.stream))
    }

    pub fn is_active(&self, stream_id: &StreamId) -> bool {
        self.run.as_ref().is_some_and(|r| &r.stream_id == stream_id)
    }

    pub fn take_notices(&mut self) -> Vec<Notice> {
        std::mem::take(&mut self.notices)
    }

    /// Messages a newly attached connection needs to catch up.
    pub fn snapshot_messages(&self) -> Vec<Message> {
        let mut out = vec![self.state_message()];
        if self.session.state() != SessionState::Idle {
            out.push(Message::AssignCondition {
                trial_index: self.session.trial_index(),
                condition: self.trial().condition,
            });
        }
        for u in self.session.utterances() {
            let provenance = (u.origin == SpeakerOrigin::AvatarExtension)
                .then(|| self.ledger.query(self.session.id(), &Default::default()))
                .and_then(|records| {
                    records
                        .into_iter()
                        .find(|r| r.derived_utterance_id == u.utterance_id)
                });
            out.push(Message::TranscriptEntry {
                utterance_id: u.utterance_id.clone(),
                origin: u.origin,
                text: u.text.clone(),
                provenance,
                aborted: false,
            });
        }
        out
    }

    fn emit(&mut self, audience: Audience, message: Message) {
        self.notices.push(Notice { audience, message });
    }

    fn state_message(&self) -> Message {
        Message::StateChanged {
            state: self.session.state(),
            trial_index: self.session.trial_index(),
            autonomy: self.session.autonomy(),
        }
    }

    fn emit_state(&mut self) {
        let m = self.state_message();
        self.emit(Audience::All, m);
    }

    fn write_log(&self, record: &LogRecord) -> Result<(), CoordError> {
        if let Some(log) = &self.log {
            log.append(record)?;
        }
        Ok(())
    }

    fn transcript(&mut self, u: &Utterance, provenance: Option<ProvenanceRecord>, aborted: bool) {
        self.emit(
            Audience::All,
            Message::TranscriptEntry {
                utterance_id: u.utterance_id.clone(),
                origin: u.origin,
                text: u.text.clone(),
                provenance,
                aborted,
            },
        );
    }

    fn agent_says(&mut self, text: &str, now: u64) -> Result<Utterance, CoordError> {
        let u = self.session.new_utterance(SpeakerOrigin::Agent, text, now);
        self.session.record_utterance(u.clone())?;
        self.write_log(&LogRecord::Utterance(u.clone()))?;
        let scenario = self.scenario();
        let prompt = Message::AgentPrompt {
            scenario_id: scenario.scenario_id.clone(),
            text: text.to_owned(),
            audio_ref: scenario.agent_voice_ref.clone(),
        };
        self.emit(Audience::All, prompt);
        self.transcript(&u, None, false);
        Ok(u)
    }

    /// Begin the next trial: assign its condition and have the agent speak
    /// the opening. Returns how long the opening takes to speak.
    pub fn start_trial(&mut self, now: u64) -> Result<u64, CoordError> {
        self.session.apply(SessionEvent::TrialStarted)?;
        self.completed = None;
        self.aborted_runs = 0;
        self.input = None;
        let trial = self.trial().clone();
        self.emit(
            Audience::All,
            Message::AssignCondition {
                trial_index: trial.trial_index,
                condition: trial.condition,
            },
        );
        let opening = self.scenario().agent_opening.clone();
        self.agent_says(&opening, now)?;
        self.emit_state();
        Ok(speech_duration_ms(&opening, self.settings.words_per_minute))
    }

    pub fn agent_spoke(&mut self) -> Result<(), CoordError> {
        self.session.apply(SessionEvent::AgentSpoke)?;
        self.emit_state();
        Ok(())
    }

    /// Record the participant's initial utterance, have the agent ask the
    /// follow-up (which masks the mediation delay), and start the first run.
    pub fn submit_initial(&mut self, input: SttInput, now: u64) -> Result<RunTicket, CoordError> {
        let (text, audio_ref) = match &input {
            SttInput::Text(t) => (t.clone(), None),
            SttInput::Audio(bytes) if bytes.is_empty() => (String::new(), None),
            SttInput::Audio(_) => (String::new(), Some("inline-audio".to_owned())),
        };
        let u = self.session.finalize_initial_utterance(text, audio_ref, now)?;
        self.ledger.register_source(&u)?;
        self.write_log(&LogRecord::Utterance(u.clone()))?;
        self.transcript(&u, None, false);
        self.input = Some(input);
        self.emit_state();
        self.session.apply(SessionEvent::FollowupAsked)?;
        let followup = self.scenario().agent_followup.clone();
        self.agent_says(&followup, now)?;
        self.begin_run()
    }

    fn begin_run(&mut self) -> Result<RunTicket, CoordError> {
        self.session.apply(SessionEvent::MediationStarted)?;
        let trial = self.trial().clone();
        let source = self
            .session
            .initial_utterance(trial.trial_index)
            .cloned()
            .ok_or(CoordError::NoActiveMediation)?;
        let input = self
            .input
            .clone()
            .unwrap_or_else(|| SttInput::Text(source.text.clone()));
        let ids = self.session.ids_mut();
        let stream_id = ids.stream();
        let response_utterance_id = ids.utterance();
        let provenance_id = ids.provenance();
        let scenario = self.scenario();
        let request = MediationRequest {
            voice_sample_ref: match trial.condition.voice_mode {
                VoiceMode::Cloned => Some(source.utterance_id.to_string()),
                VoiceMode::Robotic => None,
            },
            source_utterance: source,
            input,
            condition: trial.condition,
            scenario_id: trial.scenario_id.clone(),
            prompt_template: scenario
                .modifier_prompt_templates
                .for_mode(trial.condition.content_mode)
                .to_owned(),
            streaming: self.settings.streaming,
            chunk_ms: self.settings.chunk_ms,
            stream_id: stream_id.clone(),
            response_utterance_id,
            provenance_id: provenance_id.clone(),
        };
        let mut stream = OutboundStream::new(stream_id.clone(), self.settings.buffer_depth);
        if self.session.autonomy() == AutonomyLevel::PreviewBeforeSpeak {
            stream.hold(Hold::Preview);
        }
        let stream = SharedStream::new(stream);
        let control = RunControl::new();
        self.run = Some(ActiveRun {
            stream_id,
            provenance_id,
            control: control.clone(),
            stream: stream.clone(),
            result: None,
            dispatched: 0,
            playback_done: false,
        });
        self.emit_state();
        Ok(RunTicket {
            request,
            control,
            stream,
        })
    }

    pub fn on_status(&mut self, stream_id: &StreamId, stage: Stage, state: StageState, elapsed_ms: u64) {
        if self.is_active(stream_id) {
            self.emit(
                Audience::All,
                Message::MediationStatus {
                    stage,
                    state,
                    elapsed_ms,
                },
            );
        }
    }

    pub fn on_modified(&mut self, stream_id: &StreamId, text: &str) {
        let previewing = self
            .run
            .as_ref()
            .filter(|r| &r.stream_id == stream_id)
            .is_some_and(|r| r.stream.with(|s| s.is_held_for(Hold::Preview)));
        if previewing {
            self.emit(
                Audience::Staff,
                Message::PreviewReady {
                    stream_id: stream_id.clone(),
                    text: text.to_owned(),
                },
            );
        }
    }

    /// Buffer a synthesized chunk. Chunks of replaced runs are dropped.
    pub fn on_chunk(&mut self, chunk: AudioChunk, ready_at_ms: u64) -> Result<(), CoordError> {
        match &self.run {
            Some(run) if run.stream_id == chunk.stream_id => {
                run.stream.with(|s| s.enqueue_at(chunk, ready_at_ms))?;
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Keep the stored initial utterance in step with what the transcriber
    /// produced, so provenance records agree with their registered source.
    fn sync_transcript(&mut self, source: &Utterance) -> Result<(), CoordError> {
        let stored = self
            .session
            .utterances()
            .iter()
            .find(|u| u.utterance_id == source.utterance_id)
            .map(|u| u.text.clone());
        if stored.as_deref() != Some(source.text.as_str()) {
            self.session.set_transcript(&source.utterance_id, &source.text);
            self.ledger.register_source(source)?;
            self.write_log(&LogRecord::Utterance(source.clone()))?;
        }
        Ok(())
    }

    fn append_aborted(&mut self, mut record: ProvenanceRecord) -> Result<(), CoordError> {
        record.aborted = true;
        self.ledger.append(record.clone())?;
        let u = Utterance {
            utterance_id: record.derived_utterance_id.clone(),
            session_id: record.session_id.clone(),
            origin: SpeakerOrigin::AvatarExtension,
            text: record.derived_text.clone(),
            audio_ref: None,
            created_at: record.created_at,
        };
        self.transcript(&u, Some(record), true);
        Ok(())
    }

    /// Hand back a run's pipeline result.
    pub fn run_finished(
        &mut self,
        stream_id: &StreamId,
        result: Result<MediatedResponse, MediationError>,
    ) -> Result<(), CoordError> {
        if self.aborting.remove(stream_id) {
            let record = match result {
                Ok(resp) => {
                    self.sync_transcript(&resp.source_utterance)?;
                    Some(resp.provenance)
                }
                Err(MediationError::Aborted(run)) => {
                    self.sync_transcript(&run.source_utterance)?;
                    Some(run.provenance)
                }
                Err(_) => None,
            };
            if let Some(r) = record {
                self.append_aborted(r)?;
            }
            return Ok(());
        }
        if !self.is_active(stream_id) {
            return Ok(());
        }
        match result {
            Ok(resp) => {
                self.sync_transcript(&resp.source_utterance)?;
                let run = self.run.as_mut().expect("active");
                run.result = Some(resp);
                if run.playback_done {
                    self.try_settle()?;
                }
                Ok(())
            }
            Err(e) => {
                let run = self.run.take().expect("active");
                let (played, discarded) = run.stream.with(|s| s.discard());
                self.aborted_runs += 1;
                self.write_log(&LogRecord::RunAborted {
                    trial_index: self.session.trial_index(),
                    stream_id: run.stream_id,
                    played,
                    discarded,
                    provenance_id: run.provenance_id,
                })?;
                if let MediationError::Aborted(a) = &e {
                    self.sync_transcript(&a.source_utterance)?;
                    self.append_aborted(a.provenance.clone())?;
                }
                let detail = e.to_string();
                self.emit(Audience::All, Message::error(ErrorCode::StageFailure, detail.clone(), None));
                Err(CoordError::Mediation(detail))
            }
        }
    }

    /// Take the next chunk for playback if dispatch is allowed right now.
    pub fn next_dispatch(&mut self) -> Result<Option<AudioChunk>, CoordError> {
        let Some(run) = self.run.as_mut() else {
            return Ok(None);
        };
        let Some(chunk) = run.stream.with(|s| s.next_dispatch()) else {
            return Ok(None);
        };
        run.dispatched += 1;
        let first = run.dispatched == 1;
        if first {
            self.session.apply(SessionEvent::FirstAudioChunk)?;
        }
        self.emit(Audience::All, Message::audio_chunk(&chunk));
        if first {
            self.emit_state();
        }
        Ok(Some(chunk))
    }

    /// The final chunk of `stream_id` has finished playing.
    pub fn playback_finished(&mut self, stream_id: &StreamId) -> Result<(), CoordError> {
        let Some(run) = self.run.as_mut().filter(|r| &r.stream_id == stream_id) else {
            return Ok(());
        };
        run.playback_done = true;
        self.try_settle()
    }

    fn try_settle(&mut self) -> Result<(), CoordError> {
        let ready = self.session.state() == SessionState::SpeakingExtension
            && self
                .run
                .as_ref()
                .is_some_and(|r| r.playback_done && r.result.is_some());
        if !ready {
            return Ok(());
        }
        let run = self.run.take().expect("checked");
        let resp = run.result.expect("checked");
        self.session.apply(SessionEvent::PlaybackFinished)?;
        self.session.record_utterance(resp.response_utterance.clone())?;
        self.write_log(&LogRecord::Utterance(resp.response_utterance.clone()))?;
        self.ledger.append(resp.provenance.clone())?;
        self.write_log(&LogRecord::RunCompleted {
            trial_index: self.session.trial_index(),
            stream_id: run.stream_id,
            chunk_count: resp.chunks.len(),
            provenance_id: run.provenance_id,
        })?;
        self.transcript(&resp.response_utterance, Some(resp.provenance.clone()), false);
        self.emit(
            Audience::All,
            Message::LatencyReport {
                trace: resp.trace,
                masking_window_ms: self.settings.masking_window_ms,
                perceived_gap_ms: compute_perceived_gap(&resp.trace, self.settings.masking_window_ms),
            },
        );
        self.completed = Some(resp);
        self.emit_state();
        Ok(())
    }

    fn require_active(&self) -> Result<(), CoordError> {
        if self.session.state().has_active_mediation() {
            Ok(())
        } else {
            Err(CoordError::NoActiveMediation)
        }
    }

    /// Halt the pipeline between stages and playback at the next chunk
    /// boundary.
    pub fn pause(&mut self) -> Result<(), CoordError> {
        self.require_active()?;
        self.session.apply(SessionEvent::PauseRequested)?;
        if let Some(run) = &self.run {
            run.control.pause();
            run.stream.with(|s| match s.state() {
                StreamState::Draining => s.pause(),
                StreamState::Filling => {
                    s.hold(Hold::Operator);
                    Ok(())
                }
                StreamState::Paused | StreamState::Done => Ok(()),
            })?;
        }
        self.emit_state();
        Ok(())
    }

    pub fn resume(&mut self) -> Result<(), CoordError> {
        self.require_active()?;
        self.session.apply(SessionEvent::ResumeRequested)?;
        if let Some(run) = &self.run {
            run.control.resume();
            run.stream.with(|s| {
                s.release(Hold::Operator);
                if s.state() == StreamState::Paused {
                    s.resume()
                } else {
                    Ok(())
                }
            })?;
        }
        self.emit_state();
        self.try_settle()
    }

    /// Abandon the current run, keeping whatever already played, and start
    /// a replacement.
    pub fn restart(&mut self) -> Result<RunTicket, CoordError> {
        self.require_active()?;
        self.session.apply(SessionEvent::Restart)?;
        if let Some(run) = self.run.take() {
            run.control.cancel();
            let (played, discarded) = run.stream.with(|s| s.discard());
            self.aborted_runs += 1;
            self.write_log(&LogRecord::RunAborted {
                trial_index: self.session.trial_index(),
                stream_id: run.stream_id.clone(),
                played,
                discarded,
                provenance_id: run.provenance_id,
            })?;
            match run.result {
                Some(resp) => self.append_aborted(resp.provenance)?,
                None => {
                    self.aborting.insert(run.stream_id);
                }
            }
        }
        self.begin_run()
    }

    /// Returns true when the change applied immediately.
    pub fn set_autonomy(&mut self, level: AutonomyLevel) -> bool {
        let applied = self.session.set_autonomy(level);
        self.emit_state();
        applied
    }

    pub fn release_preview(&mut self, stream_id: &StreamId) -> Result<(), CoordError> {
        let run = self
            .run
            .as_ref()
            .filter(|r| &r.stream_id == stream_id)
            .ok_or_else(|| CoordError::UnknownStream(stream_id.clone()))?;
        let released = run.stream.with(|s| {
            let held = s.is_held_for(Hold::Preview);
            s.release(Hold::Preview);
            held
        });
        if released {
            Ok(())
        } else {
            Err(CoordError::NotPreviewing(stream_id.clone()))
        }
    }

    /// Validate and log the trial. On a validation failure the session stays
    /// in `CollectingSelfReport` so the report can be resubmitted.
    pub fn submit_self_report(
        &mut self,
        items: Vec<SelfReportItem>,
        free_text: Option<String>,
    ) -> Result<TrialLogEntry, CoordError> {
        crate::session::advance(self.session.state(), SessionEvent::SelfReportSubmitted)?;
        let trial = self.trial().clone();
        let completed = self.completed.as_ref().ok_or(CoordError::NoActiveMediation)?;
        let initial = self
            .session
            .initial_utterance(trial.trial_index)
            .ok_or(CoordError::NoActiveMediation)?;
        let report = SelfReport {
            trial_ref: trial.trial_index,
            items,
            free_text,
        };
        let entry = record_trial(
            &trial,
            initial,
            completed,
            &report,
            &TrialOutcome {
                session_id: self.session.id(),
                participant_index: self.session.plan().participant_index,
                masking_window_ms: self.settings.masking_window_ms,
                aborted_runs: self.aborted_runs,
                streaming: self.settings.streaming,
            },
        )?;
        self.session.apply(SessionEvent::SelfReportSubmitted)?;
        self.write_log(&LogRecord::Trial(entry.clone()))?;
        if self.session.is_finished() {
            self.stop()?;
        }
        self.emit_state();
        Ok(entry)
    }

    /// Write the closing log record once; cancels any run in flight.
    pub fn stop(&mut self) -> Result<(), CoordError> {
        if self.stopped {
            return Ok(());
        }
        self.stopped = true;
        if let Some(run) = self.run.take() {
            run.control.cancel();
            run.stream.with(|s| s.discard());
        }
        let completed_trials = self.session.trial_index()
            + usize::from(self.session.state() == SessionState::TrialComplete);
        self.write_log(&LogRecord::SessionStopped { completed_trials })
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    /// Utterance ids of the response utterances recorded so far.
    pub fn responses(&self) -> Vec<UtteranceId> {
        self.session
            .utterances()
            .iter()
            .filter(|u| u.origin == SpeakerOrigin::AvatarExtension)
            .map(|u| u.utterance_id.clone())
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::adapters::mock::MockBackend;
    use crate::adapters::StageContext;
    use crate::clock::{Clock, VirtualClock};
    use crate::experiment::{default_questionnaire, plan_for, PromptTemplates};
    use crate::ids::SessionId;
    use crate::pipeline::{run_mediation, Backend, PipelineEvent};
    use crate::provenance::QueryFilter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn scenarios() -> Vec<ScenarioScript> {
        (0..6)
            .map(|i| ScenarioScript {
                scenario_id: ScenarioId::new(format!("sc{i}")),
                title: format!("Scenario {i}"),
                agent_opening: "You find a wallet. What do you do?".into(),
                agent_followup: "Why?".into(),
                modifier_prompt_templates: PromptTemplates {
                    repetition: "Repeat: {text}".into(),
                    enhancement: "Strengthen: {text}".into(),
                    countered_conclusion: "Counter: {text}".into(),
                },
                agent_voice_ref: None,
            })
            .collect()
    }

    fn coordinator(settings: MediationSettings) -> Coordinator {
        let pool = scenarios();
        let plan = plan_for(0, &pool).unwrap();
        let session = Session::new(SessionId::new("s"), "P000", plan).unwrap();
        let map = pool.into_iter().map(|s| (s.scenario_id.clone(), s)).collect();
        Coordinator::new(session, Arc::new(map), settings, Arc::new(Ledger::in_memory()), None).unwrap()
    }

    fn execute(c: &mut Coordinator, ticket: &RunTicket, clock: &VirtualClock, seed: u64) {
        let backend = Backend::mock(MockBackend::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = StageContext {
            clock,
            rng: &mut rng,
        };
        let id = ticket.request.stream_id.clone();
        let start = clock.now_ms();
        let result = run_mediation(&ticket.request, &backend, &mut ctx, &ticket.control, &mut |e| match e {
            PipelineEvent::Status {
                stage,
                state,
                elapsed_ms,
            } => c.on_status(&id, stage, state, elapsed_ms),
            PipelineEvent::Modified { text } => c.on_modified(&id, text),
            PipelineEvent::Chunk { chunk, ready_at_ms } => {
                c.on_chunk(chunk.clone(), start + ready_at_ms).unwrap()
            }
        });
        c.run_finished(&id, result).unwrap();
    }

    fn report() -> Vec<SelfReportItem> {
        default_questionnaire()
            .into_iter()
            .map(|q| SelfReportItem {
                item_id: q.item_id,
                construct: q.construct,
                scale_min: q.scale_min,
                scale_max: q.scale_max,
                response: q.scale_min,
            })
            .collect()
    }

    fn to_mediation(c: &mut Coordinator, clock: &VirtualClock) -> RunTicket {
        let speak = c.start_trial(clock.now_ms()).unwrap();
        clock.advance(speak);
        c.agent_spoke().unwrap();
        c.submit_initial(SttInput::Text("I should return it.".into()), clock.now_ms())
            .unwrap()
    }

    #[test]
    fn clean_trial_notices_and_log_entry() {
        let clock = VirtualClock::new();
        let mut c = coordinator(MediationSettings::default());
        let ticket = to_mediation(&mut c, &clock);
        c.take_notices();
        execute(&mut c, &ticket, &clock, 1);
        while c.next_dispatch().unwrap().is_some() {}
        c.playback_finished(&ticket.request.stream_id).unwrap();
        assert_eq!(c.session().state(), SessionState::CollectingSelfReport);
        let notices = c.take_notices();
        let statuses = notices
            .iter()
            .filter(|n| matches!(n.message, Message::MediationStatus { .. }))
            .count();
        let reports: Vec<_> = notices
            .iter()
            .filter_map(|n| match &n.message {
                Message::LatencyReport { trace, .. } => Some(*trace),
                _ => None,
            })
            .collect();
        assert_eq!(statuses, 6);
        assert_eq!(reports.len(), 1);
        assert!(reports[0].violations().is_empty());
        let entry = c.submit_self_report(report(), None).unwrap();
        assert_eq!(entry.aborted_runs, 0);
        assert_eq!(c.session().state(), SessionState::TrialComplete);
    }

    #[test]
    fn restart_during_playback_flags_old_record() {
        let clock = VirtualClock::new();
        let mut c = coordinator(MediationSettings::default());
        let ticket = to_mediation(&mut c, &clock);
        execute(&mut c, &ticket, &clock, 1);
        c.next_dispatch().unwrap().unwrap();
        assert_eq!(c.session().state(), SessionState::SpeakingExtension);
        let replacement = c.restart().unwrap();
        assert_eq!(c.session().state(), SessionState::Mediating);
        execute(&mut c, &replacement, &clock, 2);
        while c.next_dispatch().unwrap().is_some() {}
        c.playback_finished(&replacement.request.stream_id).unwrap();
        let entry = c.submit_self_report(report(), None).unwrap();
        assert_eq!(entry.aborted_runs, 1);
        let all = c.ledger.query(
            c.session().id(),
            &QueryFilter {
                include_aborted: true,
                ..Default::default()
            },
        );
        assert_eq!(all.len(), 2);
        assert_eq!(all.iter().filter(|r| !r.aborted).count(), 1);
        assert_eq!(c.responses().len(), 1);
    }

    #[test]
    fn restart_before_pipeline_returns_is_settled_later() {
        let clock = VirtualClock::new();
        let mut c = coordinator(MediationSettings::default());
        let first = to_mediation(&mut c, &clock);
        let second = c.restart().unwrap();
        assert!(first.control.is_cancelled());
        execute(&mut c, &first, &clock, 1);
        let aborted = c.ledger.query(
            c.session().id(),
            &QueryFilter {
                include_aborted: true,
                ..Default::default()
            },
        );
        assert_eq!(aborted.len(), 1);
        assert!(aborted[0].aborted);
        assert_eq!(aborted[0].derived_text, "");
        execute(&mut c, &second, &clock, 2);
        assert_eq!(c.session().state(), SessionState::Mediating);
    }

    #[test]
    fn pause_before_first_chunk_holds_stream() {
        let clock = VirtualClock::new();
        let mut c = coordinator(MediationSettings::default());
        let ticket = to_mediation(&mut c, &clock);
        c.pause().unwrap();
        assert_eq!(
            c.session().state(),
            SessionState::Paused(crate::session::ResumeTarget::Mediating)
        );
        ticket.control.resume();
        execute(&mut c, &ticket, &clock, 1);
        assert!(c.next_dispatch().unwrap().is_none());
        c.resume().unwrap();
        assert!(c.next_dispatch().unwrap().is_some());
        assert_eq!(c.session().state(), SessionState::SpeakingExtension);
    }

    #[test]
    fn pause_during_final_chunk_defers_settlement() {
        let clock = VirtualClock::new();
        let mut c = coordinator(MediationSettings::default());
        let ticket = to_mediation(&mut c, &clock);
        execute(&mut c, &ticket, &clock, 1);
        while c.next_dispatch().unwrap().is_some() {}
        c.pause().unwrap();
        c.playback_finished(&ticket.request.stream_id).unwrap();
        assert!(matches!(c.session().state(), SessionState::Paused(_)));
        c.resume().unwrap();
        assert_eq!(c.session().state(), SessionState::CollectingSelfReport);
    }

    #[test]
    fn control_outside_mediation() {
        let mut c = coordinator(MediationSettings::default());
        assert!(matches!(c.pause(), Err(CoordError::NoActiveMediation)));
        assert!(matches!(c.restart(), Err(CoordError::NoActiveMediation)));
    }

    #[test]
    fn preview_holds_until_release() {
        let clock = VirtualClock::new();
        let mut c = coordinator(MediationSettings::default());
        assert!(c.set_autonomy(AutonomyLevel::PreviewBeforeSpeak));
        let ticket = to_mediation(&mut c, &clock);
        c.take_notices();
        execute(&mut c, &ticket, &clock, 1);
        let notices = c.take_notices();
        assert!(notices.iter().any(|n| n.audience == Audience::Staff
            && matches!(n.message, Message::PreviewReady { .. })));
        assert!(c.next_dispatch().unwrap().is_none());
        c.release_preview(&ticket.request.stream_id).unwrap();
        assert!(c.next_dispatch().unwrap().is_some());
        assert!(matches!(
            c.release_preview(&ticket.request.stream_id),
            Err(CoordError::NotPreviewing(_))
        ));
    }

    #[test]
    fn self_report_validation_keeps_state() {
        let clock = VirtualClock::new();
        let mut c = coordinator(MediationSettings::default());
        let ticket = to_mediation(&mut c, &clock);
        execute(&mut c, &ticket, &clock, 1);
        while c.next_dispatch().unwrap().is_some() {}
        c.playback_finished(&ticket.request.stream_id).unwrap();
        let mut bad = report();
        bad[0].response = 99;
        assert!(matches!(
            c.submit_self_report(bad, None),
            Err(CoordError::Validation(_))
        ));
        assert_eq!(c.session().state(), SessionState::CollectingSelfReport);
        c.submit_self_report(report(), None).unwrap();
    }

    #[test]
    fn audio_input_transcript_reaches_ledger() {
        let clock = VirtualClock::new();
        let mut c = coordinator(MediationSettings::default());
        let speak = c.start_trial(0).unwrap();
        clock.advance(speak);
        c.agent_spoke().unwrap();
        let stub = crate::adapters::mock::audio_stub("I will help them.");
        let ticket = c.submit_initial(SttInput::Audio(stub), clock.now_ms()).unwrap();
        execute(&mut c, &ticket, &clock, 1);
        while c.next_dispatch().unwrap().is_some() {}
        c.playback_finished(&ticket.request.stream_id).unwrap();
        let records = c.ledger.query(c.session().id(), &QueryFilter::default());
        assert_eq!(records[0].source_text, "I will help them.");
        assert_eq!(
            c.session().initial_utterance(0).unwrap().text,
            "I will help them."
        );
    }
}
