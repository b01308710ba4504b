//! Domain types and the per-session dialogue state machine.
//!
//! One trial is a single round: the agent asks its opening question, the
//! participant answers, the agent asks for more details, and the mediated
//! continuation is spoken by the participant's avatar extension. A self-report
//! closes the trial.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::{PlanError, TrialPlan};
use crate::ids::{IdSource, SessionId, UtteranceId};

/// Who produced an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpeakerOrigin {
    Participant,
    AvatarExtension,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub utterance_id: UtteranceId,
    pub session_id: SessionId,
    pub origin: SpeakerOrigin,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_ref: Option<String>,
    /// Session-local monotonic milliseconds.
    pub created_at: u64,
}

impl Utterance {
    pub fn is_finalized(&self) -> bool {
        !self.text.trim().is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VoiceMode {
    Cloned,
    Robotic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContentMode {
    Repetition,
    Enhancement,
    CounteredConclusion,
}

impl VoiceMode {
    pub const ALL: [VoiceMode; 2] = [VoiceMode::Cloned, VoiceMode::Robotic];
}

impl ContentMode {
    pub const ALL: [ContentMode; 3] = [
        ContentMode::Repetition,
        ContentMode::Enhancement,
        ContentMode::CounteredConclusion,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {kind} `{value}`")]
pub struct UnknownMode {
    pub kind: &'static str,
    pub value: String,
}

impl FromStr for VoiceMode {
    type Err = UnknownMode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Cloned" => Ok(VoiceMode::Cloned),
            "Robotic" => Ok(VoiceMode::Robotic),
            other => Err(UnknownMode {
                kind: "voice mode",
                value: other.to_owned(),
            }),
        }
    }
}

impl FromStr for ContentMode {
    type Err = UnknownMode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Repetition" => Ok(ContentMode::Repetition),
            "Enhancement" => Ok(ContentMode::Enhancement),
            "CounteredConclusion" => Ok(ContentMode::CounteredConclusion),
            other => Err(UnknownMode {
                kind: "content mode",
                value: other.to_owned(),
            }),
        }
    }
}

impl fmt::Display for VoiceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for ContentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One cell of the voice × content matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Condition {
    pub voice_mode: VoiceMode,
    pub content_mode: ContentMode,
}

impl Condition {
    pub const fn new(voice_mode: VoiceMode, content_mode: ContentMode) -> Self {
        Self {
            voice_mode,
            content_mode,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.voice_mode, self.content_mode)
    }
}

/// Whether mediated output plays automatically or waits for operator release.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AutonomyLevel {
    PreviewBeforeSpeak,
    #[default]
    AutoSpeak,
}

/// The state a paused session returns to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResumeTarget {
    Mediating,
    SpeakingExtension,
}

impl From<ResumeTarget> for SessionState {
    fn from(t: ResumeTarget) -> Self {
        match t {
            ResumeTarget::Mediating => SessionState::Mediating,
            ResumeTarget::SpeakingExtension => SessionState::SpeakingExtension,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionState {
    Idle,
    AgentPrompting,
    ListeningInitial,
    AwaitingFollowup,
    Mediating,
    SpeakingExtension,
    Paused(ResumeTarget),
    CollectingSelfReport,
    TrialComplete,
}

impl SessionState {
    /// Every state value, with both pause targets.
    pub const ALL: [SessionState; 10] = [
        SessionState::Idle,
        SessionState::AgentPrompting,
        SessionState::ListeningInitial,
        SessionState::AwaitingFollowup,
        SessionState::Mediating,
        SessionState::SpeakingExtension,
        SessionState::Paused(ResumeTarget::Mediating),
        SessionState::Paused(ResumeTarget::SpeakingExtension),
        SessionState::CollectingSelfReport,
        SessionState::TrialComplete,
    ];

    /// True while a mediation run is in flight or being played back.
    pub fn has_active_mediation(self) -> bool {
        matches!(
            self,
            SessionState::Mediating | SessionState::SpeakingExtension | SessionState::Paused(_)
        )
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionState::Paused(t) => write!(f, "Paused({t:?})"),
            other => fmt::Debug::fmt(other, f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionEvent {
    TrialStarted,
    AgentSpoke,
    InitialUtteranceFinalized,
    FollowupAsked,
    MediationStarted,
    FirstAudioChunk,
    PlaybackFinished,
    PauseRequested,
    ResumeRequested,
    Restart,
    SelfReportSubmitted,
}

impl SessionEvent {
    pub const ALL: [SessionEvent; 11] = [
        SessionEvent::TrialStarted,
        SessionEvent::AgentSpoke,
        SessionEvent::InitialUtteranceFinalized,
        SessionEvent::FollowupAsked,
        SessionEvent::MediationStarted,
        SessionEvent::FirstAudioChunk,
        SessionEvent::PlaybackFinished,
        SessionEvent::PauseRequested,
        SessionEvent::ResumeRequested,
        SessionEvent::Restart,
        SessionEvent::SelfReportSubmitted,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("illegal transition: {event:?} in state {state}")]
    IllegalTransition {
        state: SessionState,
        event: SessionEvent,
    },
    #[error("invalid trial plan: {0}")]
    InvalidTrialPlan(#[from] PlanError),
    #[error("utterance text must be non-empty once finalized")]
    EmptyUtterance,
    #[error("initial utterance already recorded for trial {0}")]
    DuplicateInitialUtterance(usize),
    #[error("timestamp {got} ms precedes last session timestamp {last} ms")]
    NonMonotonicTimestamp { last: u64, got: u64 },
}

/// The transition table. Returns the unique successor for a legal pair.
///
/// `TrialStarted` out of `TrialComplete` is always legal here; [`Session`]
/// additionally rejects it after the final trial.
pub fn advance(state: SessionState, event: SessionEvent) -> Result<SessionState, SessionError> {
    use SessionEvent as E;
    use SessionState as S;

    let next = match (state, event) {
        (S::Idle, E::TrialStarted) | (S::TrialComplete, E::TrialStarted) => S::AgentPrompting,
        (S::AgentPrompting, E::AgentSpoke) => S::ListeningInitial,
        (S::ListeningInitial, E::InitialUtteranceFinalized) => S::AwaitingFollowup,
        (S::AwaitingFollowup, E::FollowupAsked) => S::Mediating,
        // Marks dispatch of a (possibly replacement) run.
        (S::Mediating, E::MediationStarted) => S::Mediating,
        (S::Mediating, E::FirstAudioChunk) => S::SpeakingExtension,
        (S::SpeakingExtension, E::PlaybackFinished) => S::CollectingSelfReport,
        (S::Mediating, E::PauseRequested) => S::Paused(ResumeTarget::Mediating),
        (S::SpeakingExtension, E::PauseRequested) => S::Paused(ResumeTarget::SpeakingExtension),
        (S::Paused(target), E::ResumeRequested) => target.into(),
        (S::Mediating, E::Restart)
        | (S::SpeakingExtension, E::Restart)
        | (S::Paused(_), E::Restart) => S::Mediating,
        (S::CollectingSelfReport, E::SelfReportSubmitted) => S::TrialComplete,
        (state, event) => return Err(SessionError::IllegalTransition { state, event }),
    };
    Ok(next)
}

/// Events with a defined successor from `state`, in [`SessionEvent::ALL`] order.
pub fn legal_events(state: SessionState) -> Vec<SessionEvent> {
    SessionEvent::ALL
        .into_iter()
        .filter(|e| advance(state, *e).is_ok())
        .collect()
}

/// A participant's session: state machine plus the utterances it produced.
#[derive(Debug, Clone)]
pub struct Session {
    id: SessionId,
    participant_id: String,
    plan: TrialPlan,
    trial_index: usize,
    state: SessionState,
    autonomy: AutonomyLevel,
    pending_autonomy: Option<AutonomyLevel>,
    ids: IdSource,
    utterances: Vec<Utterance>,
    initial_utterances: Vec<Option<UtteranceId>>,
    last_timestamp: u64,
}

impl Session {
    pub fn new(
        id: SessionId,
        participant_id: impl Into<String>,
        plan: TrialPlan,
    ) -> Result<Self, SessionError> {
        plan.validate()?;
        let trials = plan.trials.len();
        Ok(Self {
            ids: IdSource::new(id.clone()),
            id,
            participant_id: participant_id.into(),
            plan,
            trial_index: 0,
            state: SessionState::Idle,
            autonomy: AutonomyLevel::default(),
            pending_autonomy: None,
            utterances: Vec::new(),
            initial_utterances: vec![None; trials],
            last_timestamp: 0,
        })
    }

    pub fn id(&self) -> &SessionId {
        &self.id
    }

    pub fn participant_id(&self) -> &str {
        &self.participant_id
    }

    pub fn plan(&self) -> &TrialPlan {
        &self.plan
    }

    pub fn trial_index(&self) -> usize {
        self.trial_index
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn autonomy(&self) -> AutonomyLevel {
        self.autonomy
    }

    pub fn ids_mut(&mut self) -> &mut IdSource {
        &mut self.ids
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn is_final_trial(&self) -> bool {
        self.trial_index + 1 == self.plan.trials.len()
    }

    /// True once the last trial has reached `TrialComplete`.
    pub fn is_finished(&self) -> bool {
        self.state == SessionState::TrialComplete && self.is_final_trial()
    }

    pub fn initial_utterance(&self, trial: usize) -> Option<&Utterance> {
        let id = self.initial_utterances.get(trial)?.as_ref()?;
        self.utterances.iter().find(|u| &u.utterance_id == id)
    }

    /// Legal events from the current state, honoring the final-trial gate.
    pub fn legal_events(&self) -> Vec<SessionEvent> {
        let mut events = legal_events(self.state);
        if self.is_finished() {
            events.retain(|e| *e != SessionEvent::TrialStarted);
        }
        events
    }

    /// Apply a session event. `InitialUtteranceFinalized` must go through
    /// [`Session::finalize_initial_utterance`] so the utterance is recorded.
    pub fn apply(&mut self, event: SessionEvent) -> Result<SessionState, SessionError> {
        if event == SessionEvent::InitialUtteranceFinalized {
            return Err(SessionError::IllegalTransition {
                state: self.state,
                event,
            });
        }
        self.transition(event)
    }

    fn transition(&mut self, event: SessionEvent) -> Result<SessionState, SessionError> {
        if event == SessionEvent::TrialStarted && self.is_finished() {
            return Err(SessionError::IllegalTransition {
                state: self.state,
                event,
            });
        }
        let next = advance(self.state, event)?;
        if event == SessionEvent::TrialStarted && self.state == SessionState::TrialComplete {
            self.trial_index += 1;
        }
        self.state = next;
        if !next.has_active_mediation() {
            if let Some(level) = self.pending_autonomy.take() {
                self.autonomy = level;
            }
        }
        Ok(next)
    }

    /// Autonomy changes take effect at the next turn boundary; while a
    /// mediation is in flight the request is held until playback ends.
    /// Returns true when applied immediately.
    pub fn set_autonomy(&mut self, level: AutonomyLevel) -> bool {
        if self.state.has_active_mediation() {
            self.pending_autonomy = Some(level);
            false
        } else {
            self.pending_autonomy = None;
            self.autonomy = level;
            true
        }
    }

    fn check_timestamp(&mut self, at: u64) -> Result<(), SessionError> {
        if at < self.last_timestamp {
            return Err(SessionError::NonMonotonicTimestamp {
                last: self.last_timestamp,
                got: at,
            });
        }
        self.last_timestamp = at;
        Ok(())
    }

    /// Record the participant's initial utterance and advance past
    /// `ListeningInitial`.
    pub fn finalize_initial_utterance(
        &mut self,
        text: impl Into<String>,
        audio_ref: Option<String>,
        at: u64,
    ) -> Result<Utterance, SessionError> {
        let text = text.into();
        if text.trim().is_empty() && audio_ref.is_none() {
            return Err(SessionError::EmptyUtterance);
        }
        if self.initial_utterances[self.trial_index].is_some() {
            return Err(SessionError::DuplicateInitialUtterance(self.trial_index));
        }
        advance(self.state, SessionEvent::InitialUtteranceFinalized)?;
        self.check_timestamp(at)?;
        let utterance = Utterance {
            utterance_id: self.ids.utterance(),
            session_id: self.id.clone(),
            origin: SpeakerOrigin::Participant,
            text,
            audio_ref,
            created_at: at,
        };
        self.transition(SessionEvent::InitialUtteranceFinalized)?;
        self.initial_utterances[self.trial_index] = Some(utterance.utterance_id.clone());
        self.utterances.push(utterance.clone());
        Ok(utterance)
    }

    /// Replace the stored text of an initial utterance once transcription has
    /// produced it (audio-only input).
    pub fn set_transcript(&mut self, id: &UtteranceId, text: &str) {
        if let Some(u) = self.utterances.iter_mut().find(|u| &u.utterance_id == id) {
            u.text = text.to_owned();
        }
    }

    /// Record a non-participant utterance (agent lines, extension replies).
    pub fn record_utterance(&mut self, utterance: Utterance) -> Result<(), SessionError> {
        if !utterance.is_finalized() {
            return Err(SessionError::EmptyUtterance);
        }
        self.check_timestamp(utterance.created_at)?;
        self.utterances.push(utterance);
        Ok(())
    }

    pub fn new_utterance(&mut self, origin: SpeakerOrigin, text: &str, at: u64) -> Utterance {
        Utterance {
            utterance_id: self.ids.utterance(),
            session_id: self.id.clone(),
            origin,
            text: text.to_owned(),
            audio_ref: None,
            created_at: at,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{enumerate_conditions, Trial};
    use crate::ids::ScenarioId;
    use proptest::prelude::*;

    fn plan() -> TrialPlan {
        TrialPlan {
            participant_index: 0,
            trials: enumerate_conditions()
                .into_iter()
                .enumerate()
                .map(|(i, condition)| Trial {
                    trial_index: i,
                    condition,
                    scenario_id: ScenarioId::new(format!("sc{i}")),
                })
                .collect(),
        }
    }

    #[test]
    fn listening_to_awaiting_followup() {
        assert_eq!(
            advance(
                SessionState::ListeningInitial,
                SessionEvent::InitialUtteranceFinalized
            ),
            Ok(SessionState::AwaitingFollowup)
        );
    }

    #[test]
    fn pause_and_resume_from_mediating() {
        let paused = advance(SessionState::Mediating, SessionEvent::PauseRequested).unwrap();
        assert_eq!(paused, SessionState::Paused(ResumeTarget::Mediating));
        assert_eq!(
            advance(paused, SessionEvent::ResumeRequested),
            Ok(SessionState::Mediating)
        );
    }

    #[test]
    fn idle_playback_finished_is_illegal() {
        assert_eq!(
            advance(SessionState::Idle, SessionEvent::PlaybackFinished),
            Err(SessionError::IllegalTransition {
                state: SessionState::Idle,
                event: SessionEvent::PlaybackFinished
            })
        );
    }

    #[test]
    fn paused_only_from_mediating_or_speaking() {
        for state in SessionState::ALL {
            let r = advance(state, SessionEvent::PauseRequested);
            match state {
                SessionState::Mediating | SessionState::SpeakingExtension => assert!(r.is_ok()),
                _ => assert!(r.is_err(), "{state} should not pause"),
            }
        }
    }

    #[test]
    fn new_session_starts_idle() {
        let s = Session::new(SessionId::new("s"), "p0", plan()).unwrap();
        assert_eq!(s.state(), SessionState::Idle);
        assert_eq!(s.trial_index(), 0);
    }

    #[test]
    fn five_trial_plan_rejected() {
        let mut p = plan();
        p.trials.pop();
        assert!(matches!(
            Session::new(SessionId::new("s"), "p0", p),
            Err(SessionError::InvalidTrialPlan(_))
        ));
    }

    #[test]
    fn duplicated_condition_rejected() {
        let mut p = plan();
        p.trials[5].condition = p.trials[0].condition;
        assert!(matches!(
            Session::new(SessionId::new("s"), "p0", p),
            Err(SessionError::InvalidTrialPlan(PlanError::NotAPermutation))
        ));
    }

    #[test]
    fn autonomy_waits_for_turn_boundary() {
        let mut s = Session::new(SessionId::new("s"), "p0", plan()).unwrap();
        assert_eq!(s.autonomy(), AutonomyLevel::AutoSpeak);
        for e in [
            SessionEvent::TrialStarted,
            SessionEvent::AgentSpoke,
        ] {
            s.apply(e).unwrap();
        }
        s.finalize_initial_utterance("hi", None, 1).unwrap();
        s.apply(SessionEvent::FollowupAsked).unwrap();
        assert!(!s.set_autonomy(AutonomyLevel::PreviewBeforeSpeak));
        assert_eq!(s.autonomy(), AutonomyLevel::AutoSpeak);
        s.apply(SessionEvent::FirstAudioChunk).unwrap();
        s.apply(SessionEvent::PlaybackFinished).unwrap();
        assert_eq!(s.autonomy(), AutonomyLevel::PreviewBeforeSpeak);
    }

    fn walk_trial(s: &mut Session, at: &mut u64) {
        s.apply(SessionEvent::TrialStarted).unwrap();
        s.apply(SessionEvent::AgentSpoke).unwrap();
        *at += 1;
        s.finalize_initial_utterance("I'll try my best", None, *at)
            .unwrap();
        s.apply(SessionEvent::FollowupAsked).unwrap();
        s.apply(SessionEvent::MediationStarted).unwrap();
        s.apply(SessionEvent::FirstAudioChunk).unwrap();
        s.apply(SessionEvent::PlaybackFinished).unwrap();
        s.apply(SessionEvent::SelfReportSubmitted).unwrap();
    }

    #[test]
    fn final_trial_is_terminal() {
        let mut s = Session::new(SessionId::new("s"), "p0", plan()).unwrap();
        let mut at = 0;
        for _ in 0..6 {
            walk_trial(&mut s, &mut at);
        }
        assert!(s.is_finished());
        assert!(s.legal_events().is_empty());
        assert!(s.apply(SessionEvent::TrialStarted).is_err());
        for t in 0..6 {
            assert!(s.initial_utterance(t).is_some());
        }
    }

    #[test]
    fn second_initial_utterance_rejected() {
        let mut s = Session::new(SessionId::new("s"), "p0", plan()).unwrap();
        s.apply(SessionEvent::TrialStarted).unwrap();
        s.apply(SessionEvent::AgentSpoke).unwrap();
        s.finalize_initial_utterance("a", None, 0).unwrap();
        assert!(s.finalize_initial_utterance("b", None, 0).is_err());
    }

    proptest! {
        // Random event streams: only legal events change state, the session
        // never speaks without mediating first, each completed trial has one
        // initial utterance, and every non-terminal state has a way out.
        #[test]
        fn random_event_sequences_respect_invariants(
            picks in proptest::collection::vec(0usize..SessionEvent::ALL.len(), 0..400)
        ) {
            let mut s = Session::new(SessionId::new("s"), "p0", plan()).unwrap();
            let mut at = 0u64;
            let mut mediated = false;
            let mut current_trial = 0;
            for pick in picks {
                let event = SessionEvent::ALL[pick];
                let before = s.state();
                let result = if event == SessionEvent::InitialUtteranceFinalized {
                    at += 1;
                    s.finalize_initial_utterance("text", None, at).map(|_| s.state())
                } else {
                    s.apply(event)
                };
                match result {
                    Ok(after) => {
                        if s.trial_index() != current_trial {
                            current_trial = s.trial_index();
                            mediated = false;
                        }
                        if after == SessionState::Mediating {
                            mediated = true;
                        }
                        if after == SessionState::SpeakingExtension {
                            prop_assert!(mediated);
                        }
                        if after == SessionState::TrialComplete {
                            let count = s
                                .utterances()
                                .iter()
                                .filter(|u| u.origin == SpeakerOrigin::Participant)
                                .count();
                            prop_assert_eq!(count, s.trial_index() + 1);
                        }
                    }
                    Err(_) => prop_assert_eq!(s.state(), before),
                }
                if !s.is_finished() {
                    prop_assert!(!s.legal_events().is_empty());
                }
            }
        }

        #[test]
        fn pause_resume_is_an_involution(target in prop_oneof![
            Just(SessionState::Mediating), Just(SessionState::SpeakingExtension)
        ]) {
            let paused = advance(target, SessionEvent::PauseRequested).unwrap();
            prop_assert_eq!(advance(paused, SessionEvent::ResumeRequested).unwrap(), target);
        }
    }
}
