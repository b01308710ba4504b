//! Stage interfaces for transcription, content modification, and synthesis.
//!
//! Each stage reports its own latency. Mock implementations consume that
//! latency on the caller's [`Clock`] (instant under a virtual clock); remote
//! implementations measure wall time around an HTTP call.

pub mod audio;
pub mod mock;
pub mod negate;
pub mod remote;

use std::fmt;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::ids::StreamId;
use crate::session::{ContentMode, UnknownMode, VoiceMode};

pub use audio::AudioChunk;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Stt,
    Llm,
    Tts,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Stt, Stage::Llm, Stage::Tts];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdapterError {
    #[error("audio stub carries no embedded transcript")]
    MalformedAudioStub,
    #[error("stage input is empty")]
    EmptyInput,
    #[error("text to synthesize is empty")]
    EmptyText,
    #[error(transparent)]
    UnknownMode(#[from] UnknownMode),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{stage} stage timed out after {timeout_ms} ms")]
    StageTimeout { stage: Stage, timeout_ms: u64 },
    #[error("{stage} stage unavailable: {detail}")]
    StageUnavailable { stage: Stage, detail: String },
    #[error("{stage} stage returned a malformed response: {detail}")]
    MalformedResponse { stage: Stage, detail: String },
    /// The consumer refused further chunks (cancellation).
    #[error("synthesis interrupted by consumer")]
    Interrupted,
}

/// A latency distribution in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyDist {
    Fixed(u64),
    /// Normal draw, rounded to whole milliseconds and clipped at 0.
    Normal { mean: f64, stddev: f64 },
}

impl LatencyDist {
    pub fn mean(&self) -> f64 {
        match *self {
            LatencyDist::Fixed(v) => v as f64,
            LatencyDist::Normal { mean, .. } => mean,
        }
    }

    pub fn validate(&self, name: &str) -> Result<(), String> {
        match *self {
            LatencyDist::Fixed(_) => Ok(()),
            LatencyDist::Normal { mean, stddev } => {
                if !(mean.is_finite() && stddev.is_finite()) || mean < 0.0 || stddev < 0.0 {
                    Err(format!("{name}: normal parameters must be finite and >= 0"))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> u64 {
        match *self {
            LatencyDist::Fixed(v) => v,
            LatencyDist::Normal { mean, stddev } => {
                if stddev == 0.0 {
                    return mean.round() as u64;
                }
                let normal = Normal::new(mean, stddev).expect("validated parameters");
                normal.sample(rng).round().max(0.0) as u64
            }
        }
    }
}

/// Per-stage simulated latencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyProfile {
    pub stt_ms: LatencyDist,
    pub llm_ms: LatencyDist,
    pub tts_total_ms: LatencyDist,
    pub tts_first_chunk_ms: LatencyDist,
}

impl Default for LatencyProfile {
    /// 1.2 s transcription, 2.9 s modification, 7.5 s batch synthesis; the
    /// first streamed chunk lands after 1.5 s.
    fn default() -> Self {
        Self {
            stt_ms: LatencyDist::Fixed(1200),
            llm_ms: LatencyDist::Fixed(2900),
            tts_total_ms: LatencyDist::Fixed(7500),
            tts_first_chunk_ms: LatencyDist::Fixed(1500),
        }
    }
}

impl LatencyProfile {
    /// Normal distributions around this profile's means with standard
    /// deviation `fraction × mean`.
    pub fn to_normal(&self, fraction: f64) -> Self {
        let n = |d: LatencyDist| LatencyDist::Normal {
            mean: d.mean(),
            stddev: d.mean() * fraction,
        };
        Self {
            stt_ms: n(self.stt_ms),
            llm_ms: n(self.llm_ms),
            tts_total_ms: n(self.tts_total_ms),
            tts_first_chunk_ms: n(self.tts_first_chunk_ms),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.stt_ms.validate("stt_ms")?;
        self.llm_ms.validate("llm_ms")?;
        self.tts_total_ms.validate("tts_total_ms")?;
        self.tts_first_chunk_ms.validate("tts_first_chunk_ms")?;
        if self.tts_first_chunk_ms.mean() > self.tts_total_ms.mean() {
            return Err("tts_first_chunk_ms mean exceeds tts_total_ms mean".into());
        }
        Ok(())
    }
}

/// Input to the transcription stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SttInput {
    /// Already-transcribed text, passed through verbatim.
    Text(String),
    /// Raw audio bytes. Mock backends expect an [`mock::audio_stub`].
    Audio(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub text: String,
    pub stage_latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Modified {
    pub text: String,
    pub stage_latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthesisRequest {
    pub stream_id: StreamId,
    pub text: String,
    pub voice: VoiceMode,
    pub voice_sample_ref: Option<String>,
    pub streaming: bool,
    pub chunk_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SynthesisTiming {
    /// Stage-relative time at which the first chunk was emitted.
    pub first_chunk_ms: u64,
    /// Stage-relative time at which the final chunk was emitted.
    pub total_ms: u64,
    /// Duration of the synthesized audio.
    pub audio_ms: u64,
}

/// Per-call environment handed to every adapter.
pub struct StageContext<'a> {
    pub clock: &'a dyn Clock,
    pub rng: &'a mut dyn RngCore,
}

pub trait SpeechToText: Send + Sync {
    fn transcribe(&self, input: &SttInput, ctx: &mut StageContext<'_>)
        -> Result<Transcript, AdapterError>;
}

pub trait ContentModifier: Send + Sync {
    fn modify(
        &self,
        text: &str,
        mode: ContentMode,
        prompt_template: &str,
        ctx: &mut StageContext<'_>,
    ) -> Result<Modified, AdapterError>;
}

/// Receives chunks in sequence order as they are produced. Returning
/// [`AdapterError::Interrupted`] stops synthesis at the chunk boundary.
pub type ChunkSink<'a> = dyn FnMut(AudioChunk) -> Result<(), AdapterError> + 'a;

pub trait TextToSpeech: Send + Sync {
    fn synthesize(
        &self,
        request: &SynthesisRequest,
        ctx: &mut StageContext<'_>,
        emit: &mut ChunkSink<'_>,
    ) -> Result<SynthesisTiming, AdapterError>;
}

/// Runs [`TextToSpeech::synthesize`] and collects every chunk.
pub fn synthesize_all(
    tts: &dyn TextToSpeech,
    request: &SynthesisRequest,
    ctx: &mut StageContext<'_>,
) -> Result<(Vec<AudioChunk>, SynthesisTiming), AdapterError> {
    let mut chunks = Vec::new();
    let timing = tts.synthesize(request, ctx, &mut |c| {
        chunks.push(c);
        Ok(())
    })?;
    Ok((chunks, timing))
}
