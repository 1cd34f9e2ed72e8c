//! Deterministic network harness for exchanges between in-memory replicas.
//!
//! Each exchange pairs two replicas and runs both [`Peer`]s against a single
//! FIFO of in-flight frames. The script's actions are applied to the head of
//! that queue in order; once the script runs out, remaining frames are
//! delivered. A peer still waiting when the queue drains has timed out.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::wire::{decode_frame, encode_frame, Peer};
use super::{ReplicaState, SyncError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetAction {
    /// Deliver the head frame.
    Deliver,
    /// Discard the head frame.
    Drop,
    /// Deliver the head frame and queue a copy at the back.
    Duplicate,
    /// Move the head frame to the back.
    Delay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeScript {
    pub a: usize,
    pub b: usize,
    #[serde(default)]
    pub actions: Vec<NetAction>,
    /// Per-side pairing tokens; defaults to the scenario token on both.
    #[serde(default)]
    pub tokens: Option<(String, String)>,
}

impl ExchangeScript {
    pub fn clean(a: usize, b: usize) -> Self {
        ExchangeScript {
            a,
            b,
            actions: vec![],
            tokens: None,
        }
    }

    pub fn with_actions(a: usize, b: usize, actions: Vec<NetAction>) -> Self {
        ExchangeScript {
            actions,
            ..Self::clean(a, b)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub replicas: Vec<ReplicaState>,
    pub token: String,
    pub exchanges: Vec<ExchangeScript>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub exchange: usize,
    pub action: NetAction,
    pub from: usize,
    pub to: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[allow(clippy::large_enum_variant)]
pub enum ExchangeOutcome {
    /// Both sides committed the merged state.
    Completed,
    /// Per side (a, b): `None` if it committed, otherwise its error.
    Partial {
        a: Option<SyncError>,
        b: Option<SyncError>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExchangeTrace {
    pub events: Vec<TraceEvent>,
    pub outcomes: Vec<ExchangeOutcome>,
    pub final_states: Vec<ReplicaState>,
    /// All replicas hold identical record sets.
    pub converged: bool,
}

struct InFlight {
    to: usize,
    frame: Vec<u8>,
}

pub fn simulate_network(scenario: &Scenario) -> Result<ExchangeTrace, SyncError> {
    let n = scenario.replicas.len();
    if n < 2 {
        return Err(SyncError::MalformedScenario(format!(
            "need at least 2 replicas, got {n}"
        )));
    }
    for (i, ex) in scenario.exchanges.iter().enumerate() {
        if ex.a >= n || ex.b >= n || ex.a == ex.b {
            return Err(SyncError::MalformedScenario(format!(
                "exchange {i} pairs replicas {} and {} of {n}",
                ex.a, ex.b
            )));
        }
    }

    let mut states = scenario.replicas.clone();
    let mut events = Vec::new();
    let mut outcomes = Vec::new();

    for (idx, ex) in scenario.exchanges.iter().enumerate() {
        let (token_a, token_b) = ex
            .tokens
            .clone()
            .unwrap_or_else(|| (scenario.token.clone(), scenario.token.clone()));
        let ends = [ex.a, ex.b];
        let (peer_a, hello_a) = Peer::new(&states[ex.a], &token_a);
        let (peer_b, hello_b) = Peer::new(&states[ex.b], &token_b);
        let mut peers = [peer_a, peer_b];
        let mut queue: VecDeque<InFlight> = VecDeque::from([
            InFlight {
                to: 1,
                frame: encode_frame(&hello_a),
            },
            InFlight {
                to: 0,
                frame: encode_frame(&hello_b),
            },
        ]);

        let mut script = ex.actions.iter().copied();
        while let Some(head) = queue.pop_front() {
            let action = script.next().unwrap_or(NetAction::Deliver);
            let msg = decode_frame(&head.frame)?;
            events.push(TraceEvent {
                exchange: idx,
                action,
                from: ends[1 - head.to],
                to: ends[head.to],
                message: msg.kind().to_string(),
            });
            match action {
                NetAction::Drop => continue,
                NetAction::Delay => {
                    queue.push_back(head);
                    continue;
                }
                NetAction::Duplicate => queue.push_back(InFlight {
                    to: head.to,
                    frame: head.frame.clone(),
                }),
                NetAction::Deliver => {}
            }
            // A failed peer stops talking; its error is kept in its phase.
            if let Ok(replies) = peers[head.to].handle(msg) {
                for reply in replies {
                    queue.push_back(InFlight {
                        to: 1 - head.to,
                        frame: encode_frame(&reply),
                    });
                }
            }
        }

        let results = [peers[0].outcome(), peers[1].outcome()];
        let mut errors = [None, None];
        for (side, result) in results.into_iter().enumerate() {
            match result {
                Ok(merged) => states[ends[side]] = merged,
                Err(err) => errors[side] = Some(err),
            }
        }
        outcomes.push(match errors {
            [None, None] => ExchangeOutcome::Completed,
            [a, b] => ExchangeOutcome::Partial { a, b },
        });
    }

    let converged = states.windows(2).all(|w| w[0].same_records(&w[1]));
    Ok(ExchangeTrace {
        events,
        outcomes,
        final_states: states,
        converged,
    })
}
