//! Audio chunks and the mock PCM generator.
//!
//! The single audio format is 16-bit signed little-endian PCM, 16 kHz, mono.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ids::StreamId;
use crate::session::VoiceMode;

pub const SAMPLE_RATE_HZ: u64 = 16_000;
pub const BYTES_PER_SAMPLE: u64 = 2;

/// PCM bytes for `duration_ms` of audio.
pub const fn pcm_len(duration_ms: u64) -> usize {
    (duration_ms * SAMPLE_RATE_HZ / 1000 * BYTES_PER_SAMPLE) as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioChunk {
    pub stream_id: StreamId,
    pub seq: u64,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
    pub duration_ms: u64,
    pub is_final: bool,
}

/// Check contiguity from 0, a single trailing final flag, and positive
/// durations. Returns the first problem found.
pub fn check_chunk_sequence(chunks: &[AudioChunk]) -> Result<(), String> {
    if chunks.is_empty() {
        return Err("no chunks".into());
    }
    for (i, c) in chunks.iter().enumerate() {
        if c.seq != i as u64 {
            return Err(format!("chunk {i} has seq {}", c.seq));
        }
        if c.duration_ms == 0 {
            return Err(format!("chunk {i} has zero duration"));
        }
        if c.is_final != (i + 1 == chunks.len()) {
            return Err(format!("chunk {i} has is_final = {}", c.is_final));
        }
        if c.stream_id != chunks[0].stream_id {
            return Err(format!("chunk {i} belongs to another stream"));
        }
    }
    Ok(())
}

/// Deterministic PCM for a text slice in a voice. Cloned voices produce a
/// smooth triangle wave, robotic voices a square wave, with the period keyed
/// by a hash of the text so different slices sound different.
pub fn synth_pcm(text: &str, voice: VoiceMode, duration_ms: u64) -> Vec<u8> {
    let mut hasher = Sha256::new();
    hasher.update(match voice {
        VoiceMode::Cloned => b"cloned".as_slice(),
        VoiceMode::Robotic => b"robotic".as_slice(),
    });
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    // Period between 40 and 167 samples (~96-400 Hz).
    let period = 40 + u64::from(digest[0] & 0x7f);
    let amplitude: i64 = 4_000 + i64::from(digest[1]) * 32;

    let samples = pcm_len(duration_ms) / BYTES_PER_SAMPLE as usize;
    let mut out = Vec::with_capacity(samples * 2);
    for n in 0..samples as u64 {
        let phase = n % period;
        let value = match voice {
            VoiceMode::Cloned => {
                let half = period / 2;
                let ramp = if phase < half { phase } else { period - phase };
                (ramp as i64 * 2 * amplitude) / period as i64 - amplitude / 2
            }
            VoiceMode::Robotic => {
                if phase < period / 2 {
                    amplitude
                } else {
                    -amplitude
                }
            }
        };
        out.extend_from_slice(&(value as i16).to_le_bytes());
    }
    out
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm_byte_math() {
        assert_eq!(pcm_len(1000), 32_000);
        assert_eq!(synth_pcm("hello", VoiceMode::Cloned, 250).len(), 8_000);
    }

    #[test]
    fn voices_are_distinguishable_and_deterministic() {
        let a = synth_pcm("I should report it", VoiceMode::Cloned, 100);
        let b = synth_pcm("I should report it", VoiceMode::Robotic, 100);
        assert_ne!(a, b);
        assert_eq!(a, synth_pcm("I should report it", VoiceMode::Cloned, 100));
    }

    #[test]
    fn sequence_check() {
        let chunk = |seq, is_final| AudioChunk {
            stream_id: StreamId::new("s"),
            seq,
            payload: vec![],
            duration_ms: 10,
            is_final,
        };
        assert!(check_chunk_sequence(&[chunk(0, false), chunk(1, true)]).is_ok());
        assert!(check_chunk_sequence(&[chunk(0, true), chunk(1, true)]).is_err());
        assert!(check_chunk_sequence(&[chunk(0, false), chunk(2, true)]).is_err());
        assert!(check_chunk_sequence(&[]).is_err());
    }
}
