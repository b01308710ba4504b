//! HTTP clients for externally hosted stage services.
//!
//! Request and response bodies are JSON:
//!
//! | stage | request                                               | response                          |
//! |-------|-------------------------------------------------------|-----------------------------------|
//! | STT   | `{"text"}` or `{"audio_b64"}`                         | `{"text"}`                        |
//! | LLM   | `{"text", "mode", "template"}`                        | `{"text"}`                        |
//! | TTS   | `{"text", "voice", "voice_sample_ref"?, "streaming", "chunk_ms"}` | one `{"seq", "pcm_b64", "duration_ms", "is_final"}` per line |
//!
//! Latency is the measured wall time of the call. Each endpoint bounds its
//! in-flight requests; callers beyond the bound queue.

use std::io::{BufRead, BufReader};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    AdapterError, AudioChunk, ChunkSink, ContentModifier, Modified, SpeechToText, Stage,
    StageContext, SttInput, SynthesisRequest, SynthesisTiming, TextToSpeech, Transcript,
};
use crate::session::ContentMode;

fn default_max_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Full URL the stage request is POSTed to.
    pub url: String,
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

/// Counting gate for concurrent requests.
#[derive(Debug)]
struct InFlight {
    active: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(max: usize) -> Self {
        Self {
            active: Mutex::new(0),
            freed: Condvar::new(),
            max: max.max(1),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|p| p.into_inner());
        while *active >= self.max {
            active = self.freed.wait(active).unwrap_or_else(|p| p.into_inner());
        }
        *active += 1;
        Permit(self)
    }

    fn active(&self) -> usize {
        *self.active.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|p| p.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// One remote stage endpoint.
#[derive(Debug)]
pub struct RemoteEndpoint {
    stage: Stage,
    config: EndpointConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl RemoteEndpoint {
    pub fn new(stage: Stage, config: EndpointConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        Self {
            stage,
            in_flight: InFlight::new(config.max_in_flight),
            config,
            agent,
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Requests currently holding a slot.
    pub fn in_flight(&self) -> usize {
        self.in_flight.active()
    }

    fn map_err(&self, err: ureq::Error, started: Instant) -> AdapterError {
        let stage = self.stage;
        if started.elapsed() >= Duration::from_millis(self.config.timeout_ms) {
            return AdapterError::StageTimeout {
                stage,
                timeout_ms: self.config.timeout_ms,
            };
        }
        match err {
            ureq::Error::Status(code, _) => AdapterError::StageUnavailable {
                stage,
                detail: format!("HTTP {code}"),
            },
            ureq::Error::Transport(t) => {
                let timed_out = std::error::Error::source(&t)
                    .and_then(|s| s.downcast_ref::<std::io::Error>())
                    .is_some_and(|io| {
                        matches!(
                            io.kind(),
                            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
                        )
                    });
                if timed_out {
                    AdapterError::StageTimeout {
                        stage,
                        timeout_ms: self.config.timeout_ms,
                    }
                } else {
                    AdapterError::StageUnavailable {
                        stage,
                        detail: t.to_string(),
                    }
                }
            }
        }
    }

    fn malformed(&self, detail: impl Into<String>) -> AdapterError {
        AdapterError::MalformedResponse {
            stage: self.stage,
            detail: detail.into(),
        }
    }

    /// POST a JSON body and parse a single JSON object reply.
    /// Returns the reply and the measured latency.
    pub fn call(&self, body: &Value) -> Result<(Value, u64), AdapterError> {
        let _permit = self.in_flight.acquire();
        let started = Instant::now();
        let response = self
            .agent
            .post(&self.config.url)
            .send_json(body)
            .map_err(|e| self.map_err(e, started))?;
        let text = response.into_string().map_err(|e| {
            if started.elapsed() >= Duration::from_millis(self.config.timeout_ms) {
                AdapterError::StageTimeout {
                    stage: self.stage,
                    timeout_ms: self.config.timeout_ms,
                }
            } else {
                self.malformed(e.to_string())
            }
        })?;
        let value: Value = serde_json::from_str(&text).map_err(|e| self.malformed(e.to_string()))?;
        Ok((value, started.elapsed().as_millis() as u64))
    }

    fn text_field(&self, reply: &Value) -> Result<String, AdapterError> {
        match reply.get("text").and_then(Value::as_str) {
            Some(t) if !t.trim().is_empty() => Ok(t.to_owned()),
            Some(_) => Err(self.malformed("field `text` is empty")),
            None => Err(self.malformed("missing field `text`")),
        }
    }
}

#[derive(Debug)]
pub struct RemoteStt(pub RemoteEndpoint);

impl SpeechToText for RemoteStt {
    fn transcribe(
        &self,
        input: &SttInput,
        _ctx: &mut StageContext<'_>,
    ) -> Result<Transcript, AdapterError> {
        let body = match input {
            SttInput::Text(t) if t.trim().is_empty() => return Err(AdapterError::EmptyInput),
            SttInput::Text(t) => json!({ "text": t }),
            SttInput::Audio(bytes) if bytes.is_empty() => return Err(AdapterError::EmptyInput),
            SttInput::Audio(bytes) => json!({ "audio_b64": STANDARD.encode(bytes) }),
        };
        let (reply, latency) = self.0.call(&body)?;
        Ok(Transcript {
            text: self.0.text_field(&reply)?,
            stage_latency_ms: latency,
        })
    }
}

#[derive(Debug)]
pub struct RemoteModifier(pub RemoteEndpoint);

impl ContentModifier for RemoteModifier {
    fn modify(
        &self,
        text: &str,
        mode: ContentMode,
        prompt_template: &str,
        _ctx: &mut StageContext<'_>,
    ) -> Result<Modified, AdapterError> {
        if text.trim().is_empty() {
            return Err(AdapterError::EmptyInput);
        }
        let body = json!({ "text": text, "mode": mode, "template": prompt_template });
        let (reply, latency) = self.0.call(&body)?;
        Ok(Modified {
            text: self.0.text_field(&reply)?,
            stage_latency_ms: latency,
        })
    }
}

#[derive(Debug, Deserialize)]
struct WireChunk {
    seq: u64,
    pcm_b64: String,
    duration_ms: u64,
    is_final: bool,
}

#[derive(Debug)]
pub struct RemoteTts(pub RemoteEndpoint);

impl TextToSpeech for RemoteTts {
    fn synthesize(
        &self,
        request: &SynthesisRequest,
        _ctx: &mut StageContext<'_>,
        emit: &mut ChunkSink<'_>,
    ) -> Result<SynthesisTiming, AdapterError> {
        if request.text.trim().is_empty() {
            return Err(AdapterError::EmptyText);
        }
        let endpoint = &self.0;
        let _permit = endpoint.in_flight.acquire();
        let started = Instant::now();
        let mut body = json!({
            "text": request.text,
            "voice": request.voice,
            "streaming": request.streaming,
            "chunk_ms": request.chunk_ms,
        });
        if let Some(r) = &request.voice_sample_ref {
            body["voice_sample_ref"] = json!(r);
        }
        let response = endpoint
            .agent
            .post(&endpoint.config.url)
            .send_json(&body)
            .map_err(|e| endpoint.map_err(e, started))?;

        let reader = BufReader::new(response.into_reader());
        let mut timing = SynthesisTiming::default();
        let mut expected_seq = 0;
        let mut finished = false;
        for line in reader.lines() {
            let line = line.map_err(|e| {
                if started.elapsed() >= Duration::from_millis(endpoint.config.timeout_ms) {
                    AdapterError::StageTimeout {
                        stage: Stage::Tts,
                        timeout_ms: endpoint.config.timeout_ms,
                    }
                } else {
                    endpoint.malformed(e.to_string())
                }
            })?;
            if line.trim().is_empty() {
                continue;
            }
            if finished {
                return Err(endpoint.malformed("chunk after final chunk"));
            }
            let wire: WireChunk =
                serde_json::from_str(&line).map_err(|e| endpoint.malformed(e.to_string()))?;
            if wire.seq != expected_seq {
                return Err(endpoint.malformed(format!(
                    "expected chunk seq {expected_seq}, got {}",
                    wire.seq
                )));
            }
            if wire.duration_ms == 0 {
                return Err(endpoint.malformed("chunk duration_ms must be > 0"));
            }
            let payload = STANDARD
                .decode(wire.pcm_b64)
                .map_err(|e| endpoint.malformed(e.to_string()))?;
            let elapsed = started.elapsed().as_millis() as u64;
            if expected_seq == 0 {
                timing.first_chunk_ms = elapsed;
            }
            timing.total_ms = elapsed;
            timing.audio_ms += wire.duration_ms;
            expected_seq += 1;
            finished = wire.is_final;
            emit(AudioChunk {
                stream_id: request.stream_id.clone(),
                seq: wire.seq,
                payload,
                duration_ms: wire.duration_ms,
                is_final: wire.is_final,
            })?;
        }
        if !finished {
            return Err(endpoint.malformed("stream ended without a final chunk"));
        }
        Ok(timing)
    }
}
