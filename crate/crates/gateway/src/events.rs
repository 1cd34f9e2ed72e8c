//! Per-session event logs backing the console's live stream.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::watch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Tap,
    Alert,
    SessionOpened,
    SessionClosed,
    MergeCompleted,
}

/// One line of the event stream. `seq` starts at 0 and has no gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventFrame {
    pub seq: u64,
    pub kind: EventKind,
    pub payload: Value,
}

impl EventFrame {
    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("frames always serialize");
        line.push('\n');
        line
    }
}

/// Append-only frame log with a watch channel carrying its length.
#[derive(Debug)]
pub struct EventLog {
    frames: Vec<EventFrame>,
    len: watch::Sender<u64>,
}

impl Default for EventLog {
    fn default() -> Self {
        EventLog {
            frames: Vec::new(),
            len: watch::channel(0).0,
        }
    }
}

impl EventLog {
    pub fn push(&mut self, kind: EventKind, payload: Value) -> u64 {
        let seq = self.frames.len() as u64;
        self.frames.push(EventFrame { seq, kind, payload });
        self.len.send_replace(seq + 1);
        seq
    }

    pub fn since(&self, seq: u64) -> &[EventFrame] {
        let start = (seq as usize).min(self.frames.len());
        &self.frames[start..]
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.len.subscribe()
    }
}
