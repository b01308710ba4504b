//! One mediation run: transcribe, modify, synthesize.
//!
//! Stages run strictly in order and each consumes the previous stage's
//! output, so the end-to-end latency is the plain sum of the stage latencies.

use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{
    AdapterError, AudioChunk, ContentModifier, SpeechToText, Stage, StageContext, SttInput,
    SynthesisRequest, TextToSpeech,
};
use crate::ids::{ProvenanceId, ScenarioId, StreamId, UtteranceId};
use crate::provenance::{derive_edit_script, ProvenanceRecord};
use crate::session::{Condition, SpeakerOrigin, Utterance, VoiceMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LatencyTrace {
    pub stt_ms: u64,
    pub llm_ms: u64,
    pub tts_first_chunk_ms: u64,
    pub tts_total_ms: u64,
    pub end_to_end_ms: u64,
    pub time_to_first_audio_ms: u64,
}

impl LatencyTrace {
    pub fn from_stages(stt_ms: u64, llm_ms: u64, tts_first_chunk_ms: u64, tts_total_ms: u64) -> Self {
        Self {
            stt_ms,
            llm_ms,
            tts_first_chunk_ms,
            tts_total_ms,
            end_to_end_ms: stt_ms + llm_ms + tts_total_ms,
            time_to_first_audio_ms: stt_ms + llm_ms + tts_first_chunk_ms,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.end_to_end_ms != self.stt_ms + self.llm_ms + self.tts_total_ms {
            out.push(format!(
                "end_to_end_ms {} != stt {} + llm {} + tts_total {}",
                self.end_to_end_ms, self.stt_ms, self.llm_ms, self.tts_total_ms
            ));
        }
        if self.time_to_first_audio_ms != self.stt_ms + self.llm_ms + self.tts_first_chunk_ms {
            out.push(format!(
                "time_to_first_audio_ms {} != stt {} + llm {} + tts_first_chunk {}",
                self.time_to_first_audio_ms, self.stt_ms, self.llm_ms, self.tts_first_chunk_ms
            ));
        }
        if self.time_to_first_audio_ms > self.end_to_end_ms {
            out.push("time_to_first_audio_ms exceeds end_to_end_ms".to_owned());
        }
        out
    }
}

/// Silence the participant hears after a masking window of `masking_window_ms`.
pub fn compute_perceived_gap(trace: &LatencyTrace, masking_window_ms: u64) -> u64 {
    trace.time_to_first_audio_ms.saturating_sub(masking_window_ms)
}

/// The three stages a run needs.
#[derive(Clone)]
pub struct Backend {
    pub stt: Arc<dyn SpeechToText>,
    pub modifier: Arc<dyn ContentModifier>,
    pub tts: Arc<dyn TextToSpeech>,
}

impl Backend {
    pub fn mock(backend: crate::adapters::mock::MockBackend) -> Self {
        Self {
            stt: Arc::new(backend.stt),
            modifier: Arc::new(backend.modifier),
            tts: Arc::new(backend.tts),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediationRequest {
    /// The participant's initial utterance. For audio input its text is
    /// replaced by the transcript.
    pub source_utterance: Utterance,
    pub input: SttInput,
    pub condition: Condition,
    pub scenario_id: ScenarioId,
    pub prompt_template: String,
    pub voice_sample_ref: Option<String>,
    pub streaming: bool,
    pub chunk_ms: u64,
    pub stream_id: StreamId,
    pub response_utterance_id: UtteranceId,
    pub provenance_id: ProvenanceId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediatedResponse {
    pub source_utterance: Utterance,
    pub response_utterance: Utterance,
    pub modified_text: String,
    pub condition: Condition,
    pub stream_id: StreamId,
    pub chunks: Vec<AudioChunk>,
    pub trace: LatencyTrace,
    /// The provenance record for this run. The caller appends it to the
    /// ledger once the run is settled (played out or aborted).
    pub provenance: ProvenanceRecord,
}

impl MediatedResponse {
    pub fn provenance_id(&self) -> &ProvenanceId {
        &self.provenance.provenance_id
    }
}

/// What is left of a run that was cancelled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbortedRun {
    pub stream_id: StreamId,
    pub chunks_emitted: usize,
    pub source_utterance: Utterance,
    /// Flagged record covering whatever text was produced before the abort.
    pub provenance: ProvenanceRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MediationError {
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: AdapterError,
    },
    #[error("mediation aborted")]
    Aborted(Box<AbortedRun>),
    #[error("invalid mediation request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageState {
    Started,
    Finished,
}

/// Progress notifications from a run.
#[derive(Debug)]
pub enum PipelineEvent<'a> {
    /// `elapsed_ms` is 0 on start and the stage latency on finish.
    Status {
        stage: Stage,
        state: StageState,
        elapsed_ms: u64,
    },
    /// The modifier's output, before synthesis starts.
    Modified { text: &'a str },
    /// A chunk is ready; `ready_at_ms` is relative to the run start.
    Chunk {
        chunk: &'a AudioChunk,
        ready_at_ms: u64,
    },
}

#[derive(Debug, Default)]
struct ControlFlags {
    paused: bool,
    cancelled: bool,
}

/// Pause and cancellation for an in-flight run. Both are observed between
/// stages and between chunk emissions, never mid-chunk.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    inner: Arc<(Mutex<ControlFlags>, Condvar)>,
}

impl RunControl {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pause(&self) {
        self.inner.0.lock().unwrap_or_else(|p| p.into_inner()).paused = true;
    }

    pub fn resume(&self) {
        let (lock, cv) = &*self.inner;
        lock.lock().unwrap_or_else(|p| p.into_inner()).paused = false;
        cv.notify_all();
    }

    pub fn cancel(&self) {
        let (lock, cv) = &*self.inner;
        lock.lock().unwrap_or_else(|p| p.into_inner()).cancelled = true;
        cv.notify_all();
    }

    pub fn is_cancelled(&self) -> bool {
        self.inner.0.lock().unwrap_or_else(|p| p.into_inner()).cancelled
    }

    pub fn is_paused(&self) -> bool {
        self.inner.0.lock().unwrap_or_else(|p| p.into_inner()).paused
    }

    /// Block while paused; `false` once cancelled.
    pub fn checkpoint(&self) -> bool {
        let (lock, cv) = &*self.inner;
        let mut flags = lock.lock().unwrap_or_else(|p| p.into_inner());
        while flags.paused && !flags.cancelled {
            flags = cv.wait(flags).unwrap_or_else(|p| p.into_inner());
        }
        !flags.cancelled
    }
}

fn provenance_record(
    request: &MediationRequest,
    source: &Utterance,
    derived_text: &str,
    aborted: bool,
    created_at: u64,
) -> ProvenanceRecord {
    ProvenanceRecord {
        provenance_id: request.provenance_id.clone(),
        session_id: source.session_id.clone(),
        source_utterance_id: source.utterance_id.clone(),
        derived_utterance_id: request.response_utterance_id.clone(),
        derived_origin: SpeakerOrigin::AvatarExtension,
        condition: request.condition,
        edit_script: derive_edit_script(&source.text, derived_text),
        aborted,
        created_at,
        source_text: source.text.clone(),
        derived_text: derived_text.to_owned(),
    }
}

/// Execute one run. Stage failures are tagged with the stage; a cancelled
/// run returns [`MediationError::Aborted`] carrying a flagged record.
pub fn run_mediation(
    request: &MediationRequest,
    backend: &Backend,
    ctx: &mut StageContext<'_>,
    control: &RunControl,
    observe: &mut dyn FnMut(PipelineEvent<'_>),
) -> Result<MediatedResponse, MediationError> {
    if request.source_utterance.origin != SpeakerOrigin::Participant {
        return Err(MediationError::InvalidRequest(
            "source utterance must come from the participant".into(),
        ));
    }
    let run_start = ctx.clock.now_ms();
    let mut source = request.source_utterance.clone();
    let mut chunks_emitted = 0usize;

    let aborted = |source: &Utterance, derived: &str, chunks_emitted: usize, at: u64| {
        MediationError::Aborted(Box::new(AbortedRun {
            stream_id: request.stream_id.clone(),
            chunks_emitted,
            source_utterance: source.clone(),
            provenance: provenance_record(request, source, derived, true, at),
        }))
    };
    let stage_err = |stage| move |source| MediationError::Stage { stage, source };

    // Transcription
    if !control.checkpoint() {
        return Err(aborted(&source, "", 0, ctx.clock.now_ms()));
    }
    observe(PipelineEvent::Status {
        stage: Stage::Stt,
        state: StageState::Started,
        elapsed_ms: 0,
    });
    let transcript = backend
        .stt
        .transcribe(&request.input, ctx)
        .map_err(stage_err(Stage::Stt))?;
    observe(PipelineEvent::Status {
        stage: Stage::Stt,
        state: StageState::Finished,
        elapsed_ms: transcript.stage_latency_ms,
    });
    source.text = transcript.text;

    // Content modification
    if !control.checkpoint() {
        return Err(aborted(&source, "", 0, ctx.clock.now_ms()));
    }
    observe(PipelineEvent::Status {
        stage: Stage::Llm,
        state: StageState::Started,
        elapsed_ms: 0,
    });
    let modified = backend
        .modifier
        .modify(
            &source.text,
            request.condition.content_mode,
            &request.prompt_template,
            ctx,
        )
        .map_err(stage_err(Stage::Llm))?;
    observe(PipelineEvent::Status {
        stage: Stage::Llm,
        state: StageState::Finished,
        elapsed_ms: modified.stage_latency_ms,
    });
    observe(PipelineEvent::Modified {
        text: &modified.text,
    });

    // Synthesis
    if !control.checkpoint() {
        return Err(aborted(&source, &modified.text, 0, ctx.clock.now_ms()));
    }
    observe(PipelineEvent::Status {
        stage: Stage::Tts,
        state: StageState::Started,
        elapsed_ms: 0,
    });
    let synthesis = SynthesisRequest {
        stream_id: request.stream_id.clone(),
        text: modified.text.clone(),
        voice: request.condition.voice_mode,
        voice_sample_ref: match request.condition.voice_mode {
            VoiceMode::Cloned => request.voice_sample_ref.clone(),
            VoiceMode::Robotic => None,
        },
        streaming: request.streaming,
        chunk_ms: request.chunk_ms,
    };
    let clock = ctx.clock;
    let mut chunks = Vec::new();
    let timing = backend.tts.synthesize(&synthesis, ctx, &mut |chunk| {
        if !control.checkpoint() {
            return Err(AdapterError::Interrupted);
        }
        observe(PipelineEvent::Chunk {
            chunk: &chunk,
            ready_at_ms: clock.now_ms() - run_start,
        });
        chunks.push(chunk);
        chunks_emitted += 1;
        Ok(())
    });
    let timing = match timing {
        Ok(t) => t,
        Err(AdapterError::Interrupted) => {
            return Err(aborted(&source, &modified.text, chunks_emitted, clock.now_ms()))
        }
        Err(e) => return Err(stage_err(Stage::Tts)(e)),
    };
    observe(PipelineEvent::Status {
        stage: Stage::Tts,
        state: StageState::Finished,
        elapsed_ms: timing.total_ms,
    });

    let now = clock.now_ms();
    let response_utterance = Utterance {
        utterance_id: request.response_utterance_id.clone(),
        session_id: source.session_id.clone(),
        origin: SpeakerOrigin::AvatarExtension,
        text: modified.text.clone(),
        audio_ref: Some(request.stream_id.to_string()),
        created_at: now,
    };
    let provenance = provenance_record(request, &source, &modified.text, false, now);
    Ok(MediatedResponse {
        trace: LatencyTrace::from_stages(
            transcript.stage_latency_ms,
            modified.stage_latency_ms,
            timing.first_chunk_ms,
            timing.total_ms,
        ),
        source_utterance: source,
        response_utterance,
        modified_text: modified.text,
        condition: request.condition,
        stream_id: request.stream_id.clone(),
        chunks,
        provenance,
    })
}
