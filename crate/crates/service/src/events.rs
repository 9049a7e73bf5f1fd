//! Sequenced event log shared by every session, with per-client acks so a
//! reconnecting client can resume where it left off.

use std::collections::{HashMap, VecDeque};

use ical::hitl::SessionEvent;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub session_id: String,
    pub event: SessionEvent,
}

struct Inner {
    next_seq: u64,
    buffer: VecDeque<Envelope>,
    acks: HashMap<String, u64>,
}

pub struct EventLog {
    inner: Mutex<Inner>,
    capacity: usize,
    tx: broadcast::Sender<Envelope>,
}

impl EventLog {
    /// Keeps the last `capacity` events for replay.
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        let (tx, _) = broadcast::channel(capacity);
        Self { inner: Mutex::new(Inner { next_seq: 1, buffer: VecDeque::new(), acks: HashMap::new() }), capacity, tx }
    }

    pub fn publish(&self, session_id: &str, event: SessionEvent) -> Envelope {
        let mut g = self.inner.lock();
        let env = Envelope { seq: g.next_seq, session_id: session_id.to_string(), event };
        g.next_seq += 1;
        if g.buffer.len() == self.capacity {
            g.buffer.pop_front();
        }
        g.buffer.push_back(env.clone());
        let _ = self.tx.send(env.clone());
        env
    }

    /// Buffered events with `seq > after`.
    pub fn since(&self, after: u64) -> Vec<Envelope> {
        self.inner.lock().buffer.iter().filter(|e| e.seq > after).cloned().collect()
    }

    /// The highest seq published so far, 0 when none.
    pub fn last_seq(&self) -> u64 {
        self.inner.lock().next_seq - 1
    }

    /// Records that `client` has processed everything up to `seq`. Acks never
    /// move backwards and cannot run ahead of what was published.
    pub fn ack(&self, client: &str, seq: u64) -> u64 {
        let mut g = self.inner.lock();
        let seq = seq.min(g.next_seq - 1);
        let slot = g.acks.entry(client.to_string()).or_default();
        *slot = (*slot).max(seq);
        *slot
    }

    pub fn acked(&self, client: &str) -> u64 {
        self.inner.lock().acks.get(client).copied().unwrap_or(0)
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Envelope> {
        self.tx.subscribe()
    }
}
