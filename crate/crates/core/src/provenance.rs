//! Who authored what.
//!
//! Every avatar-extension utterance is linked to the participant utterance it
//! was derived from by an edit script over word segments. A segment is a run
//! of non-whitespace together with the whitespace that follows it (leading
//! whitespace forms its own segment), so concatenating segments reproduces
//! the text byte for byte.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::JsonlWriter;
use crate::ids::{ProvenanceId, SessionId, UtteranceId};
use crate::session::{Condition, SpeakerOrigin, Utterance};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    /// Copy this many source segments.
    Keep(usize),
    /// Emit text that is not in the source.
    Insert(String),
    /// Skip this many source segments.
    Delete(usize),
}

/// Split text into word segments.
pub fn segments(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = false;
    for (i, ch) in text.char_indices() {
        if !ch.is_whitespace() && prev_ws && i > 0 {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = ch.is_whitespace();
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn push_op(script: &mut Vec<EditOp>, op: EditOp) {
    match (script.last_mut(), op) {
        (Some(EditOp::Keep(n)), EditOp::Keep(m)) => *n += m,
        (Some(EditOp::Delete(n)), EditOp::Delete(m)) => *n += m,
        (Some(EditOp::Insert(s)), EditOp::Insert(t)) => s.push_str(&t),
        (_, op) => script.push(op),
    }
}

/// Edit script from a longest-common-subsequence alignment of word segments.
/// At each divergence deletions are emitted before insertions.
pub fn derive_edit_script(source: &str, derived: &str) -> Vec<EditOp> {
    let a = segments(source);
    let b = segments(derived);
    let (n, m) = (a.len(), b.len());
    // lcs[i][j] = LCS length of a[i..] and b[j..]
    let mut lcs = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if a[i] == b[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let mut script = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        // Keep only when skipping either side would shorten the LCS, so that
        // matches align as late as possible.
        let here = lcs[i][j];
        let del_ok = i < n && lcs[i + 1][j] == here;
        let ins_ok = j < m && lcs[i][j + 1] == here;
        if i < n && j < m && a[i] == b[j] && !del_ok && !ins_ok {
            push_op(&mut script, EditOp::Keep(1));
            i += 1;
            j += 1;
        } else if del_ok {
            push_op(&mut script, EditOp::Delete(1));
            i += 1;
        } else {
            push_op(&mut script, EditOp::Insert(b[j].to_owned()));
            j += 1;
        }
    }
    script
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    #[error("edit op #{op} reaches segment {needed} but the source has {available}")]
    OutOfRange {
        op: usize,
        needed: usize,
        available: usize,
    },
    #[error("script leaves {0} source segments unconsumed")]
    Unconsumed(usize),
}

/// Rebuild the derived text from the source and a script.
pub fn apply_edit_script(source: &str, script: &[EditOp]) -> Result<String, ApplyError> {
    let segs = segments(source);
    let mut out = String::new();
    let mut pos = 0;
    for (k, op) in script.iter().enumerate() {
        match op {
            EditOp::Keep(len) | EditOp::Delete(len) => {
                let end = pos + len;
                if end > segs.len() {
                    return Err(ApplyError::OutOfRange {
                        op: k,
                        needed: end,
                        available: segs.len(),
                    });
                }
                if matches!(op, EditOp::Keep(_)) {
                    segs[pos..end].iter().for_each(|s| out.push_str(s));
                }
                pos = end;
            }
            EditOp::Insert(text) => out.push_str(text),
        }
    }
    if pos != segs.len() {
        return Err(ApplyError::Unconsumed(segs.len() - pos));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub provenance_id: ProvenanceId,
    pub session_id: SessionId,
    pub source_utterance_id: UtteranceId,
    pub derived_utterance_id: UtteranceId,
    pub derived_origin: SpeakerOrigin,
    pub condition: Condition,
    pub edit_script: Vec<EditOp>,
    pub aborted: bool,
    pub created_at: u64,
    pub source_text: String,
    pub derived_text: String,
}

impl ProvenanceRecord {
    /// True when the script rebuilds the derived text from the source text.
    pub fn round_trips(&self) -> bool {
        apply_edit_script(&self.source_text, &self.edit_script).as_deref()
            == Ok(self.derived_text.as_str())
    }
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("unknown source utterance `{0}`")]
    UnknownSourceUtterance(UtteranceId),
    #[error("source utterance `{id}` has origin {origin:?}, expected Participant")]
    NotAParticipantUtterance { id: UtteranceId, origin: SpeakerOrigin },
    #[error("record `{0}`: source text differs from the registered utterance")]
    SourceTextMismatch(ProvenanceId),
    #[error("record `{0}`: edit script does not reproduce the derived text")]
    RoundTripMismatch(ProvenanceId),
    #[error("duplicate provenance id `{0}`")]
    DuplicateProvenanceId(ProvenanceId),
    #[error("ledger i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct QueryFilter {
    pub origin: Option<SpeakerOrigin>,
    pub condition: Option<Condition>,
    pub include_aborted: bool,
}

#[derive(Debug, Default)]
struct SessionLedger {
    sources: HashMap<UtteranceId, Utterance>,
    records: Vec<ProvenanceRecord>,
    ids: HashSet<ProvenanceId>,
    writer: Option<JsonlWriter>,
}

/// Append-only provenance store for any number of sessions. When a directory
/// is configured every record is also written to `<session_id>.prov.jsonl`.
#[derive(Debug, Default)]
pub struct Ledger {
    dir: Option<PathBuf>,
    sessions: RwLock<BTreeMap<SessionId, SessionLedger>>,
}

pub fn ledger_path(dir: &Path, session: &SessionId) -> PathBuf {
    dir.join(format!("{session}.prov.jsonl"))
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn persistent(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            sessions: RwLock::default(),
        }
    }

    /// Make a participant utterance available as a provenance source.
    /// Re-registering the same id replaces its text (transcription).
    pub fn register_source(&self, utterance: &Utterance) -> Result<(), LedgerError> {
        if utterance.origin != SpeakerOrigin::Participant {
            return Err(LedgerError::NotAParticipantUtterance {
                id: utterance.utterance_id.clone(),
                origin: utterance.origin,
            });
        }
        let mut sessions = self.sessions.write().unwrap_or_else(|p| p.into_inner());
        sessions
            .entry(utterance.session_id.clone())
            .or_default()
            .sources
            .insert(utterance.utterance_id.clone(), utterance.clone());
        Ok(())
    }

    pub fn append(&self, record: ProvenanceRecord) -> Result<(), LedgerError> {
        let mut sessions = self.sessions.write().unwrap_or_else(|p| p.into_inner());
        let ledger = sessions.entry(record.session_id.clone()).or_default();
        let source = ledger
            .sources
            .get(&record.source_utterance_id)
            .ok_or_else(|| LedgerError::UnknownSourceUtterance(record.source_utterance_id.clone()))?;
        if source.text != record.source_text {
            return Err(LedgerError::SourceTextMismatch(record.provenance_id));
        }
        if !record.round_trips() {
            return Err(LedgerError::RoundTripMismatch(record.provenance_id));
        }
        if ledger.ids.contains(&record.provenance_id) {
            return Err(LedgerError::DuplicateProvenanceId(record.provenance_id));
        }
        if let Some(dir) = &self.dir {
            if ledger.writer.is_none() {
                ledger.writer = Some(JsonlWriter::create(ledger_path(dir, &record.session_id))?);
            }
            ledger.writer.as_ref().expect("just opened").append(&record)?;
        }
        ledger.ids.insert(record.provenance_id.clone());
        ledger.records.push(record);
        Ok(())
    }

    /// Matching records in append order.
    pub fn query(&self, session: &SessionId, filter: &QueryFilter) -> Vec<ProvenanceRecord> {
        let sessions = self.sessions.read().unwrap_or_else(|p| p.into_inner());
        let Some(ledger) = sessions.get(session) else {
            return Vec::new();
        };
        ledger
            .records
            .iter()
            .filter(|r| filter.include_aborted || !r.aborted)
            .filter(|r| filter.origin.is_none_or(|o| o == r.derived_origin))
            .filter(|r| filter.condition.is_none_or(|c| c == r.condition))
            .inspect(|r| debug_assert!(r.round_trips(), "stored record failed round trip"))
            .cloned()
            .collect()
    }

    pub fn get(&self, session: &SessionId, id: &ProvenanceId) -> Option<ProvenanceRecord> {
        let sessions = self.sessions.read().unwrap_or_else(|p| p.into_inner());
        sessions
            .get(session)?
            .records
            .iter()
            .find(|r| &r.provenance_id == id)
            .cloned()
    }

    pub fn len(&self, session: &SessionId) -> usize {
        let sessions = self.sessions.read().unwrap_or_else(|p| p.into_inner());
        sessions.get(session).map_or(0, |l| l.records.len())
    }

    pub fn is_empty(&self, session: &SessionId) -> bool {
        self.len(session) == 0
    }
}

/// Read a ledger file back.
pub fn read_ledger_file(path: &Path) -> std::io::Result<Vec<ProvenanceRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::{ContentMode, VoiceMode};
    use proptest::prelude::*;

    #[test]
    fn identity_is_single_keep() {
        assert_eq!(
            derive_edit_script("I should report it", "I should report it"),
            vec![EditOp::Keep(4)]
        );
    }

    #[test]
    fn countered_conclusion_round_trips() {
        let src = "I should report it";
        let dst = "On reflection, I take the opposite view: I should not report it";
        let script = derive_edit_script(src, dst);
        assert_eq!(apply_edit_script(src, &script).unwrap(), dst);
        assert_eq!(
            script,
            vec![
                EditOp::Insert("On reflection, I take the opposite view: ".into()),
                EditOp::Keep(2),
                EditOp::Insert("not ".into()),
                EditOp::Keep(2),
            ]
        );
    }

    #[test]
    fn empty_source_is_single_insert() {
        assert_eq!(derive_edit_script("", "hello"), vec![EditOp::Insert("hello".into())]);
        assert_eq!(derive_edit_script("", ""), vec![]);
        assert_eq!(derive_edit_script("a b", ""), vec![EditOp::Delete(2)]);
    }

    #[test]
    fn segments_cover_text() {
        assert_eq!(segments("  a b\t c "), vec!["  ", "a ", "b\t ", "c "]);
        assert_eq!(segments(""), Vec::<&str>::new());
        assert_eq!(segments("   "), vec!["   "]);
    }

    #[test]
    fn apply_rejects_bad_offsets() {
        assert!(matches!(
            apply_edit_script("a b", &[EditOp::Keep(3)]),
            Err(ApplyError::OutOfRange { .. })
        ));
        assert!(matches!(
            apply_edit_script("a b", &[EditOp::Keep(1)]),
            Err(ApplyError::Unconsumed(1))
        ));
    }

    fn participant(session: &str, id: &str, text: &str) -> Utterance {
        Utterance {
            utterance_id: UtteranceId::new(id),
            session_id: SessionId::new(session),
            origin: SpeakerOrigin::Participant,
            text: text.into(),
            audio_ref: None,
            created_at: 0,
        }
    }

    fn record(pid: &str, source: &Utterance, derived: &str, aborted: bool) -> ProvenanceRecord {
        ProvenanceRecord {
            provenance_id: ProvenanceId::new(pid),
            session_id: source.session_id.clone(),
            source_utterance_id: source.utterance_id.clone(),
            derived_utterance_id: UtteranceId::new(format!("{pid}-d")),
            derived_origin: SpeakerOrigin::AvatarExtension,
            condition: Condition::new(VoiceMode::Cloned, ContentMode::Enhancement),
            edit_script: derive_edit_script(&source.text, derived),
            aborted,
            created_at: 1,
            source_text: source.text.clone(),
            derived_text: derived.into(),
        }
    }

    #[test]
    fn append_and_query() {
        let ledger = Ledger::in_memory();
        let src = participant("s", "u0", "I'll try my best");
        ledger.register_source(&src).unwrap();
        ledger
            .append(record("p0", &src, "To put it more strongly: I'll try my best", true))
            .unwrap();
        ledger
            .append(record("p1", &src, "To put it more strongly: I'll try my best", false))
            .unwrap();
        let sid = SessionId::new("s");
        assert_eq!(ledger.query(&sid, &QueryFilter::default()).len(), 1);
        let all = ledger.query(
            &sid,
            &QueryFilter {
                include_aborted: true,
                ..Default::default()
            },
        );
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].provenance_id.as_str(), "p0");
        assert!(ledger.query(&SessionId::new("none"), &QueryFilter::default()).is_empty());
        let robotic = QueryFilter {
            condition: Some(Condition::new(VoiceMode::Robotic, ContentMode::Enhancement)),
            ..Default::default()
        };
        assert!(ledger.query(&sid, &robotic).is_empty());
    }

    #[test]
    fn unknown_source_rejected() {
        let ledger = Ledger::in_memory();
        let src = participant("s", "u0", "hi");
        assert!(matches!(
            ledger.append(record("p0", &src, "hi there", false)),
            Err(LedgerError::UnknownSourceUtterance(_))
        ));
    }

    #[test]
    fn tampered_script_rejected() {
        let ledger = Ledger::in_memory();
        let src = participant("s", "u0", "I should report it");
        ledger.register_source(&src).unwrap();
        let mut r = record("p0", &src, "I should not report it", false);
        r.edit_script = vec![EditOp::Keep(4)];
        assert!(matches!(ledger.append(r), Err(LedgerError::RoundTripMismatch(_))));
        assert_eq!(ledger.len(&SessionId::new("s")), 0);
    }

    #[test]
    fn duplicate_id_rejected() {
        let ledger = Ledger::in_memory();
        let src = participant("s", "u0", "a");
        ledger.register_source(&src).unwrap();
        ledger.append(record("p0", &src, "a b", false)).unwrap();
        assert!(matches!(
            ledger.append(record("p0", &src, "a b", false)),
            Err(LedgerError::DuplicateProvenanceId(_))
        ));
    }

    #[test]
    fn agent_utterances_are_not_sources() {
        let ledger = Ledger::in_memory();
        let mut u = participant("s", "u0", "a");
        u.origin = SpeakerOrigin::Agent;
        assert!(ledger.register_source(&u).is_err());
    }

    #[test]
    fn persistent_ledger_writes_lines() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = Ledger::persistent(dir.path());
        let src = participant("sess", "u0", "a");
        ledger.register_source(&src).unwrap();
        ledger.append(record("p0", &src, "a b", false)).unwrap();
        let back = read_ledger_file(&ledger_path(dir.path(), &SessionId::new("sess"))).unwrap();
        assert_eq!(back.len(), 1);
        assert!(back[0].round_trips());
    }

    proptest! {
        #[test]
        fn apply_derive_round_trip(a in "[ab c\n]{0,30}", b in "[ab c\n]{0,30}") {
            let script = derive_edit_script(&a, &b);
            prop_assert_eq!(apply_edit_script(&a, &script).unwrap(), b);
        }

        #[test]
        fn keeps_equal_lcs_length(a in "[xyz ]{0,24}", b in "[xyz ]{0,24}") {
            // Independent LCS by recursion with memo over segment slices.
            fn lcs(x: &[&str], y: &[&str], memo: &mut HashMap<(usize, usize), usize>) -> usize {
                if x.is_empty() || y.is_empty() { return 0; }
                if let Some(&v) = memo.get(&(x.len(), y.len())) { return v; }
                let v = if x[0] == y[0] { 1 + lcs(&x[1..], &y[1..], memo) }
                        else { lcs(&x[1..], y, memo).max(lcs(x, &y[1..], memo)) };
                memo.insert((x.len(), y.len()), v);
                v
            }
            let kept: usize = derive_edit_script(&a, &b).iter()
                .map(|op| if let EditOp::Keep(n) = op { *n } else { 0 }).sum();
            prop_assert_eq!(kept, lcs(&segments(&a), &segments(&b), &mut HashMap::new()));
        }
    }
}
