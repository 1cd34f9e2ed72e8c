//! Peer exchange protocol.
//!
//! Frames are a 4-byte big-endian payload length followed by a UTF-8 JSON
//! object whose `"type"` is `hello`, `state` or `ack`. Each side sends
//! Hello, then its full State once the pairing is accepted, then an Ack
//! after merging. A side commits its merged state only once the remote Ack
//! arrives; anything short of that leaves the local replica untouched.

use std::io::{Read, Write};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{merge_state, ReplicaState, SyncError};
use crate::ledger::{AttendanceCode, AttendanceRecord, Session, Timestamp};

pub const PROTOCOL_VERSION: u32 = 1;

/// Upper bound on a single frame payload.
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: u32,
    pub device_id: String,
    pub pairing_token: String,
}

impl Hello {
    pub fn new(device_id: &str, pairing_token: &str) -> Self {
        Hello {
            protocol_version: PROTOCOL_VERSION,
            device_id: device_id.to_string(),
            pairing_token: pairing_token.to_string(),
        }
    }
}

/// `[lecture_id, date, student_id, code, recorded_at_ms, device_id]`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRecord(
    pub String,
    pub NaiveDate,
    pub String,
    pub AttendanceCode,
    pub i64,
    pub String,
);

impl From<&AttendanceRecord> for WireRecord {
    fn from(r: &AttendanceRecord) -> Self {
        WireRecord(
            r.lecture_id.clone(),
            r.date,
            r.student_id.clone(),
            r.code,
            r.recorded_at.millis(),
            r.device_id.clone(),
        )
    }
}

impl From<WireRecord> for AttendanceRecord {
    fn from(w: WireRecord) -> Self {
        AttendanceRecord {
            lecture_id: w.0,
            date: w.1,
            student_id: w.2,
            code: w.3,
            recorded_at: Timestamp(w.4),
            device_id: w.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SyncMessage {
    Hello(Hello),
    State {
        records: Vec<WireRecord>,
        sessions: Vec<Session>,
    },
    Ack {
        merged_count: usize,
    },
}

impl SyncMessage {
    pub fn state(replica: &ReplicaState) -> Self {
        SyncMessage::State {
            records: replica.records().map(WireRecord::from).collect(),
            sessions: replica.sessions().cloned().collect(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SyncMessage::Hello(_) => "hello",
            SyncMessage::State { .. } => "state",
            SyncMessage::Ack { .. } => "ack",
        }
    }
}

pub fn encode_frame(msg: &SyncMessage) -> Vec<u8> {
    let payload = serde_json::to_vec(msg).expect("sync messages always serialize");
    let mut frame = Vec::with_capacity(4 + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    frame
}

/// Decodes exactly one frame; trailing bytes are an error.
pub fn decode_frame(frame: &[u8]) -> Result<SyncMessage, SyncError> {
    let (len, payload) = frame
        .split_first_chunk::<4>()
        .ok_or_else(|| SyncError::MalformedFrame("short length prefix".into()))?;
    let len = u32::from_be_bytes(*len) as usize;
    if payload.len() != len {
        return Err(SyncError::MalformedFrame(format!(
            "length prefix {len} but {} payload bytes",
            payload.len()
        )));
    }
    serde_json::from_slice(payload).map_err(|e| SyncError::MalformedFrame(e.to_string()))
}

pub fn write_frame<W: Write>(w: &mut W, msg: &SyncMessage) -> Result<(), SyncError> {
    w.write_all(&encode_frame(msg))
        .and_then(|_| w.flush())
        .map_err(|e| SyncError::TransportFailure(e.to_string()))
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<SyncMessage, SyncError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|e| SyncError::TransportFailure(e.to_string()))?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(SyncError::MalformedFrame(format!("frame of {len} bytes")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)
        .map_err(|e| SyncError::TransportFailure(e.to_string()))?;
    serde_json::from_slice(&payload).map_err(|e| SyncError::MalformedFrame(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingAccepted {
    pub remote_device_id: String,
}

/// Pairing check standing in for the touch-to-pair step.
pub fn handshake(local: &Hello, remote: &Hello) -> Result<PairingAccepted, SyncError> {
    if local.protocol_version != remote.protocol_version {
        return Err(SyncError::VersionMismatch {
            local: local.protocol_version,
            remote: remote.protocol_version,
        });
    }
    if local.pairing_token != remote.pairing_token {
        return Err(SyncError::TokenMismatch);
    }
    Ok(PairingAccepted {
        remote_device_id: remote.device_id.clone(),
    })
}

/// A bidirectional channel that moves whole messages.
pub trait Transport {
    fn send(&mut self, msg: &SyncMessage) -> Result<(), SyncError>;
    fn recv(&mut self) -> Result<SyncMessage, SyncError>;
}

/// Length-prefixed framing over any byte stream (e.g. a `TcpStream`).
pub struct FramedStream<S> {
    stream: S,
}

impl<S: Read + Write> FramedStream<S> {
    pub fn new(stream: S) -> Self {
        FramedStream { stream }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl<S: Read + Write> Transport for FramedStream<S> {
    fn send(&mut self, msg: &SyncMessage) -> Result<(), SyncError> {
        write_frame(&mut self.stream, msg)
    }

    fn recv(&mut self) -> Result<SyncMessage, SyncError> {
        read_frame(&mut self.stream)
    }
}

/// In-process transport carrying encoded frames over channels.
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
}

pub fn channel_pair(timeout: Duration) -> (ChannelTransport, ChannelTransport) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    (
        ChannelTransport {
            tx: tx_a,
            rx: rx_a,
            timeout,
        },
        ChannelTransport {
            tx: tx_b,
            rx: rx_b,
            timeout,
        },
    )
}

impl Transport for ChannelTransport {
    fn send(&mut self, msg: &SyncMessage) -> Result<(), SyncError> {
        self.tx
            .send(encode_frame(msg))
            .map_err(|_| SyncError::TransportFailure("peer hung up".into()))
    }

    fn recv(&mut self) -> Result<SyncMessage, SyncError> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(frame) => decode_frame(&frame),
            Err(RecvTimeoutError::Timeout) => Err(SyncError::TransportFailure("timed out".into())),
            Err(RecvTimeoutError::Disconnected) => {
                Err(SyncError::TransportFailure("peer hung up".into()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Phase {
    AwaitHello,
    AwaitState,
    AwaitAck,
    Done,
    Failed(SyncError),
}

/// One side of an exchange as a message-driven state machine. Blocking
/// drivers ([`run_exchange`]) and the network simulator both run it.
#[derive(Debug, Clone)]
pub struct Peer {
    local: ReplicaState,
    hello: Hello,
    phase: Phase,
    merged: Option<ReplicaState>,
    remote_ack: Option<usize>,
}

impl Peer {
    /// Creates a peer and the Hello it must send first.
    pub fn new(local: &ReplicaState, token: &str) -> (Self, SyncMessage) {
        let hello = Hello::new(&local.device_id, token);
        let peer = Peer {
            local: local.clone(),
            hello: hello.clone(),
            phase: Phase::AwaitHello,
            merged: None,
            remote_ack: None,
        };
        (peer, SyncMessage::Hello(hello))
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.phase, Phase::Done | Phase::Failed(_))
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    fn fail(&mut self, err: SyncError) -> SyncError {
        self.phase = Phase::Failed(err.clone());
        err
    }

    fn finish_if_acked(&mut self) -> Result<(), SyncError> {
        if let (Some(merged), Some(count)) = (&self.merged, self.remote_ack) {
            if merged.record_count() != count {
                return Err(self.fail(SyncError::ProtocolViolation(format!(
                    "remote merged {count} records, local {}",
                    merged.record_count()
                ))));
            }
            self.phase = Phase::Done;
        }
        Ok(())
    }

    /// Consumes one incoming message and returns the messages to send.
    /// Redelivered messages are ignored.
    pub fn handle(&mut self, msg: SyncMessage) -> Result<Vec<SyncMessage>, SyncError> {
        match (&self.phase, msg) {
            (Phase::Failed(err), _) => Err(err.clone()),
            (Phase::Done, _) => Ok(vec![]),
            (Phase::AwaitHello, SyncMessage::Hello(remote)) => {
                handshake(&self.hello, &remote).map_err(|e| self.fail(e))?;
                self.phase = Phase::AwaitState;
                Ok(vec![SyncMessage::state(&self.local)])
            }
            (Phase::AwaitHello, other) => Err(self.fail(SyncError::ProtocolViolation(format!(
                "{} before hello",
                other.kind()
            )))),
            (Phase::AwaitState, SyncMessage::State { records, sessions }) => {
                let remote = ReplicaState::from_parts(
                    "",
                    records.into_iter().map(AttendanceRecord::from),
                    sessions,
                );
                let merged = merge_state(&self.local, &remote);
                let ack = SyncMessage::Ack {
                    merged_count: merged.record_count(),
                };
                self.merged = Some(merged);
                self.phase = Phase::AwaitAck;
                self.finish_if_acked()?;
                Ok(vec![ack])
            }
            (Phase::AwaitState | Phase::AwaitAck, SyncMessage::Ack { merged_count }) => {
                self.remote_ack.get_or_insert(merged_count);
                self.finish_if_acked()?;
                Ok(vec![])
            }
            (Phase::AwaitState | Phase::AwaitAck, SyncMessage::Hello(_))
            | (Phase::AwaitAck, SyncMessage::State { .. }) => Ok(vec![]),
        }
    }

    /// The merged state if the exchange completed, otherwise the error that
    /// ended it (a peer still waiting is reported as a transport failure).
    pub fn outcome(&self) -> Result<ReplicaState, SyncError> {
        match &self.phase {
            Phase::Done => Ok(self.merged.clone().expect("done implies merged")),
            Phase::Failed(err) => Err(err.clone()),
            Phase::AwaitHello => Err(SyncError::TransportFailure("no hello received".into())),
            Phase::AwaitState => Err(SyncError::TransportFailure("no state received".into())),
            Phase::AwaitAck => Err(SyncError::TransportFailure("no ack received".into())),
        }
    }
}

/// Runs one side of a pairwise exchange to completion. On success returns
/// the merged replica; on any failure `local` is untouched because the
/// caller only ever sees a new state.
pub fn run_exchange<T: Transport + ?Sized>(
    transport: &mut T,
    local: &ReplicaState,
    token: &str,
) -> Result<ReplicaState, SyncError> {
    let (mut peer, hello) = Peer::new(local, token);
    transport.send(&hello)?;
    while !peer.is_finished() {
        let msg = transport.recv()?;
        for out in peer.handle(msg)? {
            transport.send(&out)?;
        }
    }
    peer.outcome()
}
