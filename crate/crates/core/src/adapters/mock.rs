//! Deterministic desk-scale backends.

use super::audio::synth_pcm;
use super::negate::negate;
use super::{
    AdapterError, AudioChunk, ChunkSink, ContentModifier, LatencyDist, LatencyProfile, Modified,
    SpeechToText, StageContext, SttInput, SynthesisRequest, SynthesisTiming, TextToSpeech,
    Transcript,
};
use crate::session::ContentMode;

pub const ENHANCEMENT_PREFIX: &str = "To put it more strongly: ";
pub const COUNTERED_PREFIX: &str = "On reflection, I take the opposite view: ";
pub const DEFAULT_WORDS_PER_MINUTE: u32 = 150;

/// Marker that opens a mock audio stub; the transcript follows as UTF-8.
pub const AUDIO_STUB_TAG: &[u8] = b"PXSTUB:";

/// Build an audio stub that the mock transcriber decodes to `transcript`.
pub fn audio_stub(transcript: &str) -> Vec<u8> {
    let mut out = AUDIO_STUB_TAG.to_vec();
    out.extend_from_slice(transcript.as_bytes());
    out
}

/// Speech duration under the word-rate model, rounded up to whole seconds.
pub fn speech_duration_ms(text: &str, words_per_minute: u32) -> u64 {
    let words = text.split_whitespace().count() as u64;
    let wpm = u64::from(words_per_minute.max(1));
    (words * 60).div_ceil(wpm) * 1000
}

#[derive(Debug, Clone)]
pub struct MockStt {
    pub latency: LatencyDist,
}

impl SpeechToText for MockStt {
    fn transcribe(
        &self,
        input: &SttInput,
        ctx: &mut StageContext<'_>,
    ) -> Result<Transcript, AdapterError> {
        let text = match input {
            SttInput::Text(t) => t.clone(),
            SttInput::Audio(bytes) => {
                let body = bytes
                    .strip_prefix(AUDIO_STUB_TAG)
                    .ok_or(AdapterError::MalformedAudioStub)?;
                let text = std::str::from_utf8(body).map_err(|_| AdapterError::MalformedAudioStub)?;
                if text.trim().is_empty() {
                    return Err(AdapterError::MalformedAudioStub);
                }
                text.to_owned()
            }
        };
        if text.trim().is_empty() {
            return Err(AdapterError::EmptyInput);
        }
        let latency = self.latency.sample(ctx.rng);
        ctx.clock.sleep_ms(latency);
        Ok(Transcript {
            text,
            stage_latency_ms: latency,
        })
    }
}

/// Fixed-template content transforms.
#[derive(Debug, Clone)]
pub struct MockModifier {
    pub latency: LatencyDist,
}

/// The transform applied by [`MockModifier`], without latency.
pub fn mock_transform(text: &str, mode: ContentMode) -> String {
    match mode {
        ContentMode::Repetition => text.to_owned(),
        ContentMode::Enhancement => format!("{ENHANCEMENT_PREFIX}{text}"),
        ContentMode::CounteredConclusion => format!("{COUNTERED_PREFIX}{}", negate(text)),
    }
}

impl ContentModifier for MockModifier {
    fn modify(
        &self,
        text: &str,
        mode: ContentMode,
        _prompt_template: &str,
        ctx: &mut StageContext<'_>,
    ) -> Result<Modified, AdapterError> {
        if text.trim().is_empty() {
            return Err(AdapterError::EmptyInput);
        }
        let latency = self.latency.sample(ctx.rng);
        ctx.clock.sleep_ms(latency);
        Ok(Modified {
            text: mock_transform(text, mode),
            stage_latency_ms: latency,
        })
    }
}

/// Word-rate synthesis. Batch mode emits one chunk after the total latency;
/// streaming emits `ceil(duration / chunk_ms)` chunks, the first after the
/// first-chunk latency and the rest `chunk_ms` apart.
#[derive(Debug, Clone)]
pub struct MockTts {
    pub total: LatencyDist,
    pub first_chunk: LatencyDist,
    pub words_per_minute: u32,
}

impl TextToSpeech for MockTts {
    fn synthesize(
        &self,
        request: &SynthesisRequest,
        ctx: &mut StageContext<'_>,
        emit: &mut ChunkSink<'_>,
    ) -> Result<SynthesisTiming, AdapterError> {
        if request.text.trim().is_empty() {
            return Err(AdapterError::EmptyText);
        }
        if request.streaming && request.chunk_ms == 0 {
            return Err(AdapterError::InvalidRequest("chunk_ms must be > 0".into()));
        }
        let audio_ms = speech_duration_ms(&request.text, self.words_per_minute);
        let start = ctx.clock.now_ms();
        let words: Vec<&str> = request.text.split_whitespace().collect();

        let (count, first_at) = if request.streaming {
            (
                audio_ms.div_ceil(request.chunk_ms),
                self.first_chunk.sample(ctx.rng),
            )
        } else {
            (1, self.total.sample(ctx.rng))
        };
        let chunk_len = if request.streaming {
            request.chunk_ms
        } else {
            audio_ms
        };

        let mut first_chunk_ms = 0;
        let mut total_ms = 0;
        for seq in 0..count {
            let due = first_at + seq * request.chunk_ms;
            ctx.clock.sleep_until_ms(start + due);
            let duration_ms = chunk_len.min(audio_ms - seq * chunk_len);
            let lo = (seq as usize * words.len()) / count as usize;
            let hi = ((seq as usize + 1) * words.len()) / count as usize;
            let slice = words[lo..hi].join(" ");
            let chunk = AudioChunk {
                stream_id: request.stream_id.clone(),
                seq,
                payload: synth_pcm(&slice, request.voice, duration_ms),
                duration_ms,
                is_final: seq + 1 == count,
            };
            let elapsed = ctx.clock.now_ms() - start;
            if seq == 0 {
                first_chunk_ms = elapsed;
            }
            total_ms = elapsed;
            emit(chunk)?;
        }
        Ok(SynthesisTiming {
            first_chunk_ms,
            total_ms,
            audio_ms,
        })
    }
}

/// The three mock stages configured from one profile.
#[derive(Debug, Clone)]
pub struct MockBackend {
    pub stt: MockStt,
    pub modifier: MockModifier,
    pub tts: MockTts,
}

impl MockBackend {
    pub fn new(profile: &LatencyProfile, words_per_minute: u32) -> Self {
        Self {
            stt: MockStt {
                latency: profile.stt_ms,
            },
            modifier: MockModifier {
                latency: profile.llm_ms,
            },
            tts: MockTts {
                total: profile.tts_total_ms,
                first_chunk: profile.tts_first_chunk_ms,
                words_per_minute,
            },
        }
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(&LatencyProfile::default(), DEFAULT_WORDS_PER_MINUTE)
    }
}
