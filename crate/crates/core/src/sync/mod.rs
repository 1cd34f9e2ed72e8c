//! Replica state and its merge.
//!
//! A [`ReplicaState`] is one device's copy of the attendance records and
//! session metadata. [`merge_state`] is a key-wise join: for each record key
//! the maximum under a total order wins, so merging is commutative,
//! associative and idempotent and replicas converge regardless of the order
//! in which they exchange.

mod sim;
mod wire;

use std::cmp::Reverse;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{AttendanceRecord, RecordKey, Session, SessionKey, SessionStatus};

pub use sim::{
    simulate_network, ExchangeOutcome, ExchangeScript, ExchangeTrace, NetAction, Scenario,
    TraceEvent,
};
pub use wire::{
    channel_pair, decode_frame, encode_frame, handshake, read_frame, run_exchange, write_frame,
    ChannelTransport, FramedStream, Hello, PairingAccepted, Peer, SyncMessage, Transport,
    WireRecord, MAX_FRAME_LEN, PROTOCOL_VERSION,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("record keys differ: {0:?} vs {1:?}")]
    KeyMismatch(RecordKey, RecordKey),
    #[error("pairing token mismatch")]
    TokenMismatch,
    #[error("protocol version mismatch: local {local}, remote {remote}")]
    VersionMismatch { local: u32, remote: u32 },
    #[error("transport failure: {0}")]
    TransportFailure(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("malformed scenario: {0}")]
    MalformedScenario(String),
}

/// Outcome of folding another replica into this one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    /// Keys that were not present locally.
    pub added: usize,
    /// Keys present locally whose record changed.
    pub replaced: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "ReplicaData", into = "ReplicaData")]
pub struct ReplicaState {
    pub device_id: String,
    records: BTreeMap<RecordKey, AttendanceRecord>,
    sessions: BTreeMap<SessionKey, Session>,
}

#[derive(Serialize, Deserialize)]
struct ReplicaData {
    device_id: String,
    records: Vec<AttendanceRecord>,
    sessions: Vec<Session>,
}

impl From<ReplicaData> for ReplicaState {
    fn from(data: ReplicaData) -> Self {
        let mut state = ReplicaState::new(&data.device_id);
        for r in data.records {
            state.join_record_in(r);
        }
        for s in data.sessions {
            state.join_session_in(s);
        }
        state
    }
}

impl From<ReplicaState> for ReplicaData {
    fn from(state: ReplicaState) -> Self {
        ReplicaData {
            device_id: state.device_id,
            records: state.records.into_values().collect(),
            sessions: state.sessions.into_values().collect(),
        }
    }
}

impl ReplicaState {
    pub fn new(device_id: &str) -> Self {
        ReplicaState {
            device_id: device_id.to_string(),
            ..Default::default()
        }
    }

    /// Builds a replica by joining every record and session in.
    pub fn from_parts(
        device_id: &str,
        records: impl IntoIterator<Item = AttendanceRecord>,
        sessions: impl IntoIterator<Item = Session>,
    ) -> Self {
        ReplicaData {
            device_id: device_id.to_string(),
            records: records.into_iter().collect(),
            sessions: sessions.into_iter().collect(),
        }
        .into()
    }

    /// Records in key order.
    pub fn records(&self) -> impl Iterator<Item = &AttendanceRecord> {
        self.records.values()
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn record(&self, key: &RecordKey) -> Option<&AttendanceRecord> {
        self.records.get(key)
    }

    pub fn session(&self, key: &SessionKey) -> Option<&Session> {
        self.sessions.get(key)
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty() && self.sessions.is_empty()
    }

    /// Overwrites the record under its key. Ledger-local writes only; peers
    /// are folded in with [`ReplicaState::merge_from`].
    pub fn put_record(&mut self, record: AttendanceRecord) {
        self.records.insert(record.key(), record);
    }

    pub fn put_session(&mut self, session: Session) {
        self.sessions.insert(session.key(), session);
    }

    fn join_record_in(&mut self, record: AttendanceRecord) -> Option<bool> {
        match self.records.get_mut(&record.key()) {
            None => {
                self.records.insert(record.key(), record);
                None
            }
            Some(existing) => {
                let changed = record_rank(&record) > record_rank(existing);
                if changed {
                    *existing = record;
                }
                Some(changed)
            }
        }
    }

    fn join_session_in(&mut self, session: Session) {
        match self.sessions.get_mut(&session.key()) {
            None => {
                self.sessions.insert(session.key(), session);
            }
            Some(existing) => {
                if session_rank(&session) > session_rank(existing) {
                    *existing = session;
                }
            }
        }
    }

    /// Joins `other` into this replica in place, keeping this device id.
    pub fn merge_from(&mut self, other: &ReplicaState) -> MergeReport {
        let mut report = MergeReport::default();
        for record in other.records.values() {
            match self.join_record_in(record.clone()) {
                None => report.added += 1,
                Some(true) => report.replaced += 1,
                Some(false) => {}
            }
        }
        for session in other.sessions.values() {
            self.join_session_in(session.clone());
        }
        report
    }

    /// Record-set equality, ignoring device identity and sessions.
    pub fn same_records(&self, other: &ReplicaState) -> bool {
        self.records == other.records
    }

    /// (lecture, date) pairs that have records but no session entry.
    pub fn orphan_records(&self) -> Vec<RecordKey> {
        self.records
            .values()
            .filter(|r| {
                !self
                    .sessions
                    .keys()
                    .any(|k| k.lecture_id == r.lecture_id && k.date == r.date)
            })
            .map(AttendanceRecord::key)
            .collect()
    }
}

fn record_rank(r: &AttendanceRecord) -> (u8, Reverse<i64>, Reverse<&str>) {
    (
        r.code.rank(),
        Reverse(r.recorded_at.millis()),
        Reverse(r.device_id.as_str()),
    )
}

fn join_unchecked<'a>(a: &'a AttendanceRecord, b: &'a AttendanceRecord) -> &'a AttendanceRecord {
    if record_rank(b) > record_rank(a) {
        b
    } else {
        a
    }
}

/// Chooses between two records for the same key: presence beats absence,
/// then the earlier timestamp, then the lexicographically smaller device id.
/// The result is always one of the inputs.
pub fn join_record(
    a: &AttendanceRecord,
    b: &AttendanceRecord,
) -> Result<AttendanceRecord, SyncError> {
    let (ka, kb) = (a.key(), b.key());
    if ka != kb {
        return Err(SyncError::KeyMismatch(ka, kb));
    }
    Ok(join_unchecked(a, b).clone())
}

type SessionRank = (Option<Reverse<i64>>, u8, Option<Reverse<i64>>);

// Earliest opened_at wins (unset counts as latest); then a closed copy beats
// an open one; then the earlier close.
fn session_rank(s: &Session) -> SessionRank {
    let status = match s.status {
        SessionStatus::Open => 0,
        SessionStatus::Closed => 1,
    };
    (
        s.opened_at.map(|t| Reverse(t.millis())),
        status,
        s.closed_at.map(|t| Reverse(t.millis())),
    )
}

pub fn join_session(a: &Session, b: &Session) -> Session {
    if session_rank(b) > session_rank(a) {
        b.clone()
    } else {
        a.clone()
    }
}

/// Key-wise union of two replicas; the result keeps `a`'s device id.
pub fn merge_state(a: &ReplicaState, b: &ReplicaState) -> ReplicaState {
    let mut merged = a.clone();
    merged.merge_from(b);
    merged
}
