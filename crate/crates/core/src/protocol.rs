//! Wire protocol: JSON text frames, one envelope per frame.
//!
//! ```text
//! {"payload":{...},"seq":7,"session_id":"...","type":"Control"}
//! ```
//!
//! Decoding is total: any byte string yields an [`Envelope`] or a
//! [`DecodeError`]. Sequence monotonicity is per connection and is checked
//! by [`SeqTracker`], not by the codec.

use std::fmt;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::adapters::{AudioChunk, Stage};
use crate::experiment::SelfReportItem;
use crate::ids::{ScenarioId, SessionId, StreamId, UtteranceId};
use crate::pipeline::{LatencyTrace, StageState};
use crate::provenance::ProvenanceRecord;
use crate::session::{AutonomyLevel, Condition, SessionState, SpeakerOrigin};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Participant,
    Operator,
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlAction {
    Pause,
    Resume,
    Restart,
    SetAutonomy,
}

/// Error codes carried by `ProtocolError` replies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    UnknownType,
    MissingField,
    BadSeq,
    Malformed,
    UnauthorizedRole,
    UnknownSession,
    IllegalTransition,
    InvalidStreamState,
    NoActiveMediation,
    ValidationFailed,
    StageFailure,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", deny_unknown_fields)]
pub enum Message {
    JoinSession {
        role: Role,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        participant_index: Option<u32>,
    },
    AssignCondition {
        trial_index: usize,
        condition: Condition,
    },
    AgentPrompt {
        scenario_id: ScenarioId,
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        audio_ref: Option<String>,
    },
    UserUtterance {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        audio_b64: Option<String>,
        is_final: bool,
    },
    MediationStatus {
        stage: Stage,
        state: StageState,
        elapsed_ms: u64,
    },
    AudioChunkMsg {
        stream_id: StreamId,
        seq: u64,
        pcm_b64: String,
        duration_ms: u64,
        is_final: bool,
    },
    Control {
        action: ControlAction,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        autonomy: Option<AutonomyLevel>,
    },
    ReleasePreview {
        stream_id: StreamId,
    },
    SelfReportSubmit {
        items: Vec<SelfReportItem>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        free_text: Option<String>,
    },
    LatencyReport {
        trace: LatencyTrace,
        masking_window_ms: u64,
        perceived_gap_ms: u64,
    },
    ProtocolError {
        code: ErrorCode,
        detail: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offending_seq: Option<u64>,
    },
    /// Server → client: a settled utterance for transcript views.
    TranscriptEntry {
        utterance_id: UtteranceId,
        origin: SpeakerOrigin,
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        provenance: Option<ProvenanceRecord>,
        #[serde(default, skip_serializing_if = "is_false")]
        aborted: bool,
    },
    /// Server → client: the session state after every transition, and once
    /// on join.
    StateChanged {
        state: SessionState,
        trial_index: usize,
        autonomy: AutonomyLevel,
    },
    /// Server → operator: mediated text awaiting release.
    PreviewReady {
        stream_id: StreamId,
        text: String,
    },
}

impl Message {
    pub const TYPES: [&'static str; 14] = [
        "JoinSession",
        "AssignCondition",
        "AgentPrompt",
        "UserUtterance",
        "MediationStatus",
        "AudioChunkMsg",
        "Control",
        "ReleasePreview",
        "SelfReportSubmit",
        "LatencyReport",
        "ProtocolError",
        "TranscriptEntry",
        "StateChanged",
        "PreviewReady",
    ];

    pub fn type_name(&self) -> &'static str {
        match self {
            Message::JoinSession { .. } => "JoinSession",
            Message::AssignCondition { .. } => "AssignCondition",
            Message::AgentPrompt { .. } => "AgentPrompt",
            Message::UserUtterance { .. } => "UserUtterance",
            Message::MediationStatus { .. } => "MediationStatus",
            Message::AudioChunkMsg { .. } => "AudioChunkMsg",
            Message::Control { .. } => "Control",
            Message::ReleasePreview { .. } => "ReleasePreview",
            Message::SelfReportSubmit { .. } => "SelfReportSubmit",
            Message::LatencyReport { .. } => "LatencyReport",
            Message::ProtocolError { .. } => "ProtocolError",
            Message::TranscriptEntry { .. } => "TranscriptEntry",
            Message::StateChanged { .. } => "StateChanged",
            Message::PreviewReady { .. } => "PreviewReady",
        }
    }

    pub fn audio_chunk(chunk: &AudioChunk) -> Self {
        Message::AudioChunkMsg {
            stream_id: chunk.stream_id.clone(),
            seq: chunk.seq,
            pcm_b64: STANDARD.encode(&chunk.payload),
            duration_ms: chunk.duration_ms,
            is_final: chunk.is_final,
        }
    }

    pub fn error(code: ErrorCode, detail: impl Into<String>, offending_seq: Option<u64>) -> Self {
        Message::ProtocolError {
            code,
            detail: detail.into(),
            offending_seq,
        }
    }

    /// Schema checks beyond field presence.
    fn check(&self) -> Result<(), (ErrorCode, String)> {
        match self {
            Message::UserUtterance {
                text: None,
                audio_b64: None,
                ..
            } => Err((
                ErrorCode::MissingField,
                "UserUtterance needs `text` or `audio_b64`".into(),
            )),
            Message::Control {
                action: ControlAction::SetAutonomy,
                autonomy: None,
            } => Err((
                ErrorCode::MissingField,
                "Control SetAutonomy needs `autonomy`".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub session_id: Option<SessionId>,
    pub seq: u64,
    pub message: Message,
}

impl Envelope {
    pub fn new(session_id: Option<SessionId>, seq: u64, message: Message) -> Self {
        Self {
            session_id,
            seq,
            message,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{code}: {detail}")]
pub struct DecodeError {
    pub code: ErrorCode,
    pub detail: String,
    /// The frame's `seq`, when it could be read.
    pub offending_seq: Option<u64>,
}

impl DecodeError {
    fn new(code: ErrorCode, detail: impl Into<String>, offending_seq: Option<u64>) -> Self {
        Self {
            code,
            detail: detail.into(),
            offending_seq,
        }
    }

    pub fn to_message(&self) -> Message {
        Message::error(self.code, self.detail.clone(), self.offending_seq)
    }
}

/// Serialize to one UTF-8 JSON frame. Keys are emitted in sorted order.
pub fn encode(envelope: &Envelope) -> Vec<u8> {
    let tagged = serde_json::to_value(&envelope.message).expect("message serializes");
    let mut obj = Map::new();
    if let Value::Object(m) = tagged {
        obj.extend(m);
    }
    if let Some(id) = &envelope.session_id {
        obj.insert("session_id".into(), Value::String(id.to_string()));
    }
    obj.insert("seq".into(), Value::from(envelope.seq));
    serde_json::to_vec(&Value::Object(obj)).expect("value serializes")
}

pub fn encode_text(envelope: &Envelope) -> String {
    String::from_utf8(encode(envelope)).expect("JSON is UTF-8")
}

pub fn decode(bytes: &[u8]) -> Result<Envelope, DecodeError> {
    let value: Value = serde_json::from_slice(bytes)
        .map_err(|e| DecodeError::new(ErrorCode::Malformed, e.to_string(), None))?;
    let Value::Object(mut obj) = value else {
        return Err(DecodeError::new(
            ErrorCode::Malformed,
            "frame is not a JSON object",
            None,
        ));
    };
    let seq = match obj.remove("seq") {
        None => return Err(DecodeError::new(ErrorCode::MissingField, "missing field `seq`", None)),
        Some(v) => v.as_u64().ok_or_else(|| {
            DecodeError::new(ErrorCode::BadSeq, format!("seq must be a non-negative integer, got {v}"), None)
        })?,
    };
    let seq_ref = Some(seq);
    let ty = match obj.get("type") {
        None => return Err(DecodeError::new(ErrorCode::MissingField, "missing field `type`", seq_ref)),
        Some(Value::String(t)) => t.clone(),
        Some(other) => {
            return Err(DecodeError::new(
                ErrorCode::Malformed,
                format!("type must be a string, got {other}"),
                seq_ref,
            ))
        }
    };
    if !Message::TYPES.contains(&ty.as_str()) {
        return Err(DecodeError::new(
            ErrorCode::UnknownType,
            format!("unknown message type `{ty}`"),
            seq_ref,
        ));
    }
    let session_id = match obj.remove("session_id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(SessionId::new(s)),
        Some(other) => {
            return Err(DecodeError::new(
                ErrorCode::Malformed,
                format!("session_id must be a string, got {other}"),
                seq_ref,
            ))
        }
    };
    if !obj.contains_key("payload") {
        return Err(DecodeError::new(
            ErrorCode::MissingField,
            format!("{ty}: missing field `payload`"),
            seq_ref,
        ));
    }
    if let Some(extra) = obj.keys().find(|k| *k != "type" && *k != "payload") {
        return Err(DecodeError::new(
            ErrorCode::Malformed,
            format!("unexpected envelope field `{extra}`"),
            seq_ref,
        ));
    }
    let message: Message = serde_json::from_value(Value::Object(obj)).map_err(|e| {
        let detail = format!("{ty}: {e}");
        let code = if e.to_string().starts_with("missing field") {
            ErrorCode::MissingField
        } else {
            ErrorCode::Malformed
        };
        DecodeError::new(code, detail, seq_ref)
    })?;
    message
        .check()
        .map_err(|(code, detail)| DecodeError::new(code, detail, seq_ref))?;
    Ok(Envelope {
        session_id,
        seq,
        message,
    })
}

/// Enforces strictly increasing `seq` on one connection.
#[derive(Debug, Clone, Default)]
pub struct SeqTracker {
    last: Option<u64>,
}

impl SeqTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check(&mut self, seq: u64) -> Result<(), DecodeError> {
        if let Some(last) = self.last {
            if seq <= last {
                return Err(DecodeError::new(
                    ErrorCode::BadSeq,
                    format!("seq {seq} does not follow {last}"),
                    Some(seq),
                ));
            }
        }
        self.last = Some(seq);
        Ok(())
    }
}

/// Outgoing seq counter for one connection.
#[derive(Debug, Clone, Default)]
pub struct SeqCounter {
    next: u64,
}

impl SeqCounter {
    pub fn next_seq(&mut self) -> u64 {
        let s = self.next;
        self.next += 1;
        s
    }
}


#[cfg(test)]
mod tests {
    use super::strategies::envelope;
    use super::*;
    use proptest::prelude::*;

    fn env(message: Message) -> Envelope {
        Envelope::new(Some(SessionId::new("s1")), 3, message)
    }

    #[test]
    fn control_pause_round_trips() {
        let e = env(Message::Control {
            action: ControlAction::Pause,
            autonomy: None,
        });
        let bytes = encode(&e);
        assert_eq!(
            String::from_utf8(bytes.clone()).unwrap(),
            r#"{"payload":{"action":"Pause"},"seq":3,"session_id":"s1","type":"Control"}"#
        );
        let back = decode(&bytes).unwrap();
        assert_eq!(back, e);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn unknown_type() {
        let err = decode(br#"{"type":"Foo","seq":1,"payload":{}}"#).unwrap_err();
        assert_eq!(err.code, ErrorCode::UnknownType);
        assert_eq!(err.offending_seq, Some(1));
    }

    #[test]
    fn missing_fields() {
        let cases: [&[u8]; 5] = [
            br#"{"seq":1,"payload":{}}"#,
            br#"{"type":"Control","payload":{"action":"Pause"}}"#,
            br#"{"type":"Control","seq":1}"#,
            br#"{"type":"AssignCondition","seq":1,"payload":{"trial_index":0}}"#,
            br#"{"type":"UserUtterance","seq":1,"payload":{"is_final":true}}"#,
        ];
        for c in cases {
            let err = decode(c).unwrap_err();
            assert_eq!(err.code, ErrorCode::MissingField, "{}", String::from_utf8_lossy(c));
        }
    }

    #[test]
    fn set_autonomy_requires_level() {
        let err = decode(br#"{"type":"Control","seq":1,"payload":{"action":"SetAutonomy"}}"#).unwrap_err();
        assert_eq!(err.code, ErrorCode::MissingField);
    }

    #[test]
    fn bad_seq_value_and_order() {
        let err = decode(br#"{"type":"Control","seq":-1,"payload":{"action":"Pause"}}"#).unwrap_err();
        assert_eq!(err.code, ErrorCode::BadSeq);
        let mut t = SeqTracker::new();
        t.check(0).unwrap();
        t.check(5).unwrap();
        let err = t.check(5).unwrap_err();
        assert_eq!((err.code, err.offending_seq), (ErrorCode::BadSeq, Some(5)));
        assert_eq!(t.check(4).unwrap_err().code, ErrorCode::BadSeq);
        t.check(6).unwrap();
    }

    #[test]
    fn malformed_frames() {
        for c in [&b"not json"[..], b"[1,2]", b"\xff\xfe", b"",
            br#"{"type":3,"seq":0,"payload":{}}"#,
            br#"{"type":"Control","seq":0,"payload":{"action":"Pause","x":1}}"#,
            br#"{"type":"Control","seq":0,"payload":{"action":"Pause"},"x":1}"#,
        ] {
            assert_eq!(decode(c).unwrap_err().code, ErrorCode::Malformed);
        }
    }

    #[test]
    fn audio_chunk_message_from_chunk() {
        let chunk = AudioChunk {
            stream_id: StreamId::new("st"),
            seq: 2,
            payload: vec![1, 2, 3],
            duration_ms: 1000,
            is_final: true,
        };
        assert_eq!(
            Message::audio_chunk(&chunk),
            Message::AudioChunkMsg {
                stream_id: StreamId::new("st"),
                seq: 2,
                pcm_b64: "AQID".into(),
                duration_ms: 1000,
                is_final: true
            }
        );
    }

    #[test]
    fn type_names_are_known() {
        let m = Message::StateChanged {
            state: SessionState::Idle,
            trial_index: 0,
            autonomy: AutonomyLevel::AutoSpeak,
        };
        assert!(Message::TYPES.contains(&m.type_name()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn valid_envelopes_round_trip(e in envelope()) {
            let bytes = encode(&e);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &e);
            prop_assert_eq!(encode(&back), bytes);
        }

        #[test]
        fn decode_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&bytes);
        }

        #[test]
        fn mutated_frames_never_panic(e in envelope(), pos in any::<prop::sample::Index>(), byte in any::<u8>()) {
            let mut bytes = encode(&e);
            let i = pos.index(bytes.len());
            bytes[i] = byte;
            let _ = decode(&bytes);
            bytes.truncate(i);
            let _ = decode(&bytes);
        }
    }
}
