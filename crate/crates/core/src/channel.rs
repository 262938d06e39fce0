//! Simulated ordered channels with byte accounting.
//!
//! Every protocol message flows through a [`Channels`] instance: FIFO,
//! reliable, with a monotone byte counter equal to the serialized size of all
//! payloads passed (8 bytes per ring element, 4 per revealed token). The
//! engine is the only writer; messages are attributed to the stage active at
//! send time, and an event log doubles as the protocol transcript.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::cost::Stage;
use crate::ring::RingElement;

/// A logical endpoint of the simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Party(usize),
    Dealer,
    /// The ideal-functionality oracle for non-arithmetic operations.
    Oracle,
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Party(i) => write!(f, "party{i}"),
            Endpoint::Dealer => write!(f, "dealer"),
            Endpoint::Oracle => write!(f, "oracle"),
        }
    }
}

/// What a message carries, for transcript and uniformity filtering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgLabel {
    /// A party's share of a freshly distributed input.
    ShareInput,
    /// Masked opening (d = x - a, e = y - b) during multiplication.
    Open,
    /// Replicated-sharing reshare after a 3PC multiplication.
    Reshare,
    /// Shares sent into the ideal non-arithmetic oracle.
    OracleIn,
    /// Fresh shares returned by the oracle.
    OracleOut,
    /// A revealed output token (the protocol output itself).
    TokenReveal,
}

#[derive(Clone, Debug)]
pub enum Payload {
    Elems(Vec<RingElement>),
    Token(u32),
}

impl Payload {
    pub fn byte_len(&self) -> u64 {
        match self {
            Payload::Elems(v) => 8 * v.len() as u64,
            Payload::Token(_) => 4,
        }
    }
}

/// One transcript entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MessageEvent {
    pub step: u64,
    pub stage: Stage,
    pub from: Endpoint,
    pub to: Endpoint,
    pub bytes: u64,
    pub label: MsgLabel,
}

#[derive(Default)]
struct ChannelState {
    bytes_sent: u64,
    queue: VecDeque<Payload>,
}

/// Histogram of the low 8 bits of every share element a receiver saw.
/// Token reveals are public outputs and excluded.
#[derive(Clone, Debug)]
pub struct ByteHistogram {
    pub counts: [u64; 256],
    pub total: u64,
}

impl Default for ByteHistogram {
    fn default() -> Self {
        ByteHistogram {
            counts: [0; 256],
            total: 0,
        }
    }
}

impl ByteHistogram {
    fn record(&mut self, elems: &[RingElement]) {
        for e in elems {
            self.counts[(e.0 & 0xff) as usize] += 1;
            self.total += 1;
        }
    }
}

/// All channels of one engine instance.
pub struct Channels {
    channels: BTreeMap<(Endpoint, Endpoint), ChannelState>,
    events: Vec<MessageEvent>,
    step: u64,
    capture_stats: bool,
    stats: BTreeMap<Endpoint, ByteHistogram>,
}

impl Channels {
    pub fn new(capture_stats: bool) -> Self {
        Channels {
            channels: BTreeMap::new(),
            events: Vec::new(),
            step: 0,
            capture_stats,
            stats: BTreeMap::new(),
        }
    }

    pub fn send(
        &mut self,
        stage: Stage,
        from: Endpoint,
        to: Endpoint,
        label: MsgLabel,
        payload: Payload,
    ) -> u64 {
        let bytes = payload.byte_len();
        if self.capture_stats && label != MsgLabel::TokenReveal {
            if let Payload::Elems(ref elems) = payload {
                self.stats.entry(to).or_default().record(elems);
            }
        }
        let chan = self.channels.entry((from, to)).or_default();
        chan.bytes_sent += bytes;
        chan.queue.push_back(payload);
        self.events.push(MessageEvent {
            step: self.step,
            stage,
            from,
            to,
            bytes,
            label,
        });
        self.step += 1;
        bytes
    }

    pub fn recv(&mut self, from: Endpoint, to: Endpoint) -> Option<Payload> {
        self.channels.get_mut(&(from, to))?.queue.pop_front()
    }

    pub fn total_bytes(&self) -> u64 {
        self.channels.values().map(|c| c.bytes_sent).sum()
    }

    pub fn channel_bytes(&self, from: Endpoint, to: Endpoint) -> u64 {
        self.channels
            .get(&(from, to))
            .map(|c| c.bytes_sent)
            .unwrap_or(0)
    }

    pub fn events(&self) -> &[MessageEvent] {
        &self.events
    }

    pub fn stats_for(&self, endpoint: Endpoint) -> Option<&ByteHistogram> {
        self.stats.get(&endpoint)
    }

    /// True if every queue has been drained; messages never linger in a
    /// correctly scheduled run.
    pub fn all_drained(&self) -> bool {
        self.channels.values().all(|c| c.queue.is_empty())
    }
}
