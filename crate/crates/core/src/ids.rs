//! String newtypes for the identifiers that cross module and wire boundaries.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Identifies one participant session; also names its log and ledger files.
    SessionId
);
string_id!(UtteranceId);
string_id!(
    /// Identifies one outbound audio stream. Every mediation run gets a fresh one.
    StreamId
);
string_id!(ProvenanceId);
string_id!(ScenarioId);

impl SessionId {
    /// A random v4 UUID session id, used by the live service.
    pub fn random() -> Self {
        Self(uuid::Uuid::new_v4().to_string())
    }

    /// A session id derived from a study seed and participant index, so that
    /// repeated simulations name their files identically.
    pub fn seeded(seed: u64, participant_index: u32) -> Self {
        use rand::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
            seed ^ (u64::from(participant_index) << 32) ^ 0x5e55_1015,
        );
        let mut bytes = [0u8; 16];
        rng.fill_bytes(&mut bytes);
        Self(uuid::Builder::from_random_bytes(bytes).into_uuid().to_string())
    }
}

/// Sequential id source scoped to one session. Ids are `<session>-<prefix><n>`.
#[derive(Debug, Clone)]
pub struct IdSource {
    session: SessionId,
    next_utterance: u64,
    next_stream: u64,
    next_provenance: u64,
}

impl IdSource {
    pub fn new(session: SessionId) -> Self {
        Self {
            session,
            next_utterance: 0,
            next_stream: 0,
            next_provenance: 0,
        }
    }

    pub fn utterance(&mut self) -> UtteranceId {
        let id = UtteranceId(format!("{}-u{}", self.session, self.next_utterance));
        self.next_utterance += 1;
        id
    }

    pub fn stream(&mut self) -> StreamId {
        let id = StreamId(format!("{}-s{}", self.session, self.next_stream));
        self.next_stream += 1;
        id
    }

    pub fn provenance(&mut self) -> ProvenanceId {
        let id = ProvenanceId(format!("{}-p{}", self.session, self.next_provenance));
        self.next_provenance += 1;
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_ids_are_stable_and_distinct() {
        assert_eq!(SessionId::seeded(7, 0), SessionId::seeded(7, 0));
        assert_ne!(SessionId::seeded(7, 0), SessionId::seeded(7, 1));
        assert_ne!(SessionId::seeded(7, 0), SessionId::seeded(8, 0));
    }

    #[test]
    fn id_source_is_sequential() {
        let mut ids = IdSource::new(SessionId::new("s"));
        assert_eq!(ids.utterance().as_str(), "s-u0");
        assert_eq!(ids.utterance().as_str(), "s-u1");
        assert_eq!(ids.stream().as_str(), "s-s0");
        assert_eq!(ids.provenance().as_str(), "s-p0");
    }
}
