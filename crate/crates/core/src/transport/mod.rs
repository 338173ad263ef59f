//! Framed, counted, phase-ordered channels between protocol roles.

mod frame;
mod link;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use frame::{
    tensor_from_payload, tensor_payload, Header, Phase, PayloadKind, ProtocolMessage, Reader, Writer, HEADER_LEN,
    MAGIC, MAX_PAYLOAD, VERSION,
};
pub use link::{accept_tcp, connect_tcp, in_process_pair, tcp_pair, Link, LINK_DEPTH};

use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Client = 0,
    P0 = 1,
    P1 = 2,
    Dealer = 3,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Client, Role::P0, Role::P1, Role::Dealer];

    pub fn from_u8(v: u8) -> Result<Self> {
        Role::ALL.get(v as usize).copied().ok_or_else(|| Error::FrameCorrupt(format!("unknown role {}", v)))
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Client => "client",
            Role::P0 => "p0",
            Role::P1 => "p1",
            Role::Dealer => "dealer",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const ROLES: usize = 4;
const PHASES: usize = 6;

fn slot(from: Role, to: Role, phase: Phase) -> usize {
    ((from as usize) * ROLES + to as usize) * PHASES + phase as usize
}

/// Atomic byte counters per (sender, receiver, phase), shared by every
/// channel of a session. Counts include the 16-byte header.
#[derive(Debug)]
pub struct CommCounters {
    sent: Vec<AtomicU64>,
    received: Vec<AtomicU64>,
}

impl Default for CommCounters {
    fn default() -> Self {
        let n = ROLES * ROLES * PHASES;
        Self {
            sent: (0..n).map(|_| AtomicU64::new(0)).collect(),
            received: (0..n).map(|_| AtomicU64::new(0)).collect(),
        }
    }
}

impl CommCounters {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn add_sent(&self, from: Role, to: Role, phase: Phase, bytes: u64) {
        self.sent[slot(from, to, phase)].fetch_add(bytes, Ordering::Relaxed);
    }

    fn add_received(&self, from: Role, to: Role, phase: Phase, bytes: u64) {
        self.received[slot(from, to, phase)].fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            sent: self.sent.iter().map(|a| a.load(Ordering::Relaxed)).collect(),
            received: self.received.iter().map(|a| a.load(Ordering::Relaxed)).collect(),
        }
    }
}

/// A frozen copy of `CommCounters`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    sent: Vec<u64>,
    received: Vec<u64>,
}

impl Default for CounterSnapshot {
    fn default() -> Self {
        CommCounters::default().snapshot()
    }
}

impl CounterSnapshot {
    pub fn sent(&self, from: Role, to: Role, phase: Phase) -> u64 {
        self.sent[slot(from, to, phase)]
    }

    pub fn received(&self, from: Role, to: Role, phase: Phase) -> u64 {
        self.received[slot(from, to, phase)]
    }

    /// Bytes sent by `from` to anyone during any of `phases`.
    pub fn sent_by(&self, from: Role, phases: &[Phase]) -> u64 {
        Role::ALL.iter().flat_map(|&to| phases.iter().map(move |&p| self.sent(from, to, p))).sum()
    }

    pub fn sent_in(&self, phases: &[Phase]) -> u64 {
        Role::ALL.iter().map(|&r| self.sent_by(r, phases)).sum()
    }

    pub fn total_sent(&self) -> u64 {
        self.sent.iter().sum()
    }

    /// Every (sender, receiver, phase) slot has equal sent and received counts.
    pub fn conserved(&self) -> bool {
        self.sent == self.received
    }

    /// Adds another snapshot slot-by-slot; used to merge per-process counters.
    pub fn merge(&mut self, other: &CounterSnapshot) {
        for (a, b) in self.sent.iter_mut().zip(&other.sent) {
            *a += b;
        }
        for (a, b) in self.received.iter_mut().zip(&other.received) {
            *a += b;
        }
    }
}

/// One frame observed on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapRecord {
    pub from: Role,
    pub to: Role,
    pub header: Header,
    pub payload: Vec<u8>,
}

/// Records every frame sent through the channels it is attached to.
#[derive(Debug, Default)]
pub struct Wiretap {
    log: Mutex<Vec<TapRecord>>,
}

impl Wiretap {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn record(&self, rec: TapRecord) {
        self.log.lock().expect("wiretap poisoned").push(rec);
    }

    pub fn records(&self) -> Vec<TapRecord> {
        self.log.lock().expect("wiretap poisoned").clone()
    }

    /// Records on the directed channel `from -> to`, in send order.
    pub fn channel(&self, from: Role, to: Role) -> Vec<TapRecord> {
        self.records().into_iter().filter(|r| r.from == from && r.to == to).collect()
    }
}

/// Shared instrumentation handed to every channel of a session.
#[derive(Clone, Debug)]
pub struct Instruments {
    pub session: u8,
    pub counters: Arc<CommCounters>,
    pub tap: Option<Arc<Wiretap>>,
    pub timeout: Duration,
}

impl Instruments {
    pub fn new(session: u8) -> Self {
        Self { session, counters: CommCounters::new(), tap: None, timeout: DEFAULT_TIMEOUT }
    }

    pub fn with_tap(mut self) -> Self {
        self.tap = Some(Wiretap::new());
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

/// One endpoint of a bidirectional channel between two roles.
///
/// Frames are stamped with the endpoint's current (epoch, batch, phase).
/// Received frames must not go backwards in that order.
pub struct Channel {
    link: Box<dyn Link>,
    local: Role,
    peer: Role,
    inst: Instruments,
    epoch: u16,
    batch: u32,
    phase: Phase,
    last_recv: Option<(u16, u32, Phase)>,
}

impl fmt::Debug for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Channel")
            .field("local", &self.local)
            .field("peer", &self.peer)
            .field("epoch", &self.epoch)
            .field("batch", &self.batch)
            .field("phase", &self.phase)
            .finish()
    }
}

impl Channel {
    pub fn new(link: Box<dyn Link>, local: Role, peer: Role, inst: Instruments) -> Self {
        Self { link, local, peer, inst, epoch: 0, batch: 0, phase: Phase::Setup, last_recv: None }
    }

    pub fn local(&self) -> Role {
        self.local
    }

    pub fn peer(&self) -> Role {
        self.peer
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Sets the stamp for subsequent sends.
    pub fn enter(&mut self, epoch: u16, batch: u32, phase: Phase) {
        self.epoch = epoch;
        self.batch = batch;
        self.phase = phase;
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn send(&mut self, kind: PayloadKind, payload: Vec<u8>) -> Result<()> {
        if payload.len() > MAX_PAYLOAD as usize {
            return Err(Error::FrameCorrupt(format!("payload of {} bytes exceeds limit", payload.len())));
        }
        let header = Header {
            session: self.inst.session,
            epoch: self.epoch,
            batch: self.batch,
            phase: self.phase,
            kind,
            len: payload.len() as u32,
        };
        self.send_message(ProtocolMessage { header, payload })
    }

    /// Sends a fully formed message; its header is sent as given.
    pub fn send_message(&mut self, msg: ProtocolMessage) -> Result<()> {
        let frame = msg.to_frame();
        let bytes = frame.len() as u64;
        self.link.send_frame(frame)?;
        self.inst.counters.add_sent(self.local, self.peer, msg.header.phase, bytes);
        if let Some(tap) = &self.inst.tap {
            tap.record(TapRecord { from: self.local, to: self.peer, header: msg.header, payload: msg.payload });
        }
        Ok(())
    }

    pub fn recv(&mut self) -> Result<ProtocolMessage> {
        let frame = self.link.recv_frame(self.inst.timeout)?;
        let bytes = frame.len() as u64;
        let msg = ProtocolMessage::from_frame(&frame)?;
        self.inst.counters.add_received(self.peer, self.local, msg.header.phase, bytes);
        if msg.header.session != self.inst.session {
            return Err(Error::UnexpectedMessage(format!(
                "session {} on a channel of session {}",
                msg.header.session, self.inst.session
            )));
        }
        let pos = msg.header.position();
        if let Some(last) = self.last_recv {
            if pos < last {
                return Err(Error::OrderViolation(format!(
                    "{} -> {}: {:?} received after {:?}",
                    self.peer, self.local, pos, last
                )));
            }
        }
        self.last_recv = Some(pos);
        Ok(msg)
    }

    /// Receives one message and checks its kind and phase against the
    /// endpoint's current stamp.
    pub fn expect(&mut self, kind: PayloadKind) -> Result<Vec<u8>> {
        let msg = self.recv()?;
        let h = msg.header;
        if h.kind != kind || h.phase != self.phase || h.epoch != self.epoch || h.batch != self.batch {
            return Err(Error::UnexpectedMessage(format!(
                "{} -> {}: expected {:?} at ({}, {}, {:?}), got {:?} at ({}, {}, {:?})",
                self.peer, self.local, kind, self.epoch, self.batch, self.phase, h.kind, h.epoch, h.batch, h.phase
            )));
        }
        Ok(msg.payload)
    }
}
