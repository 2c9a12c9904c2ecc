//! Deterministic discrete-event message passing.
//!
//! All nodes and clients of one run live in a single [`Sim`]. Events are
//! totally ordered by `(deliver_at, seq)` and every random choice is drawn
//! from one seeded generator, so the same inputs replay byte-for-byte.
//!
//! Faults are applied here rather than inside protocol code: a crashed
//! actor neither receives nor sends, and a Byzantine actor's outgoing
//! service-layer messages pass through [`Payload::corrupt`].

mod trace;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keyspace::Key;

pub use trace::{RecordKind, TraceLog, TraceRecord};

/// Abstract simulated time.
pub type Tick = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActorId(pub u32);

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A ring participant: simulation identity plus ring identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeAddress {
    pub id: ActorId,
    pub key: Key,
}

impl fmt::Display for NodeAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N{}{}", self.key, self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ByzantineKind {
    /// Service replies carry corrupted values, versions or fabricated keys.
    WrongValue,
    /// Service replies are withheld.
    Silent,
    /// Lookup replies claim the faulty node owns every key.
    Misroute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    #[serde(rename = "crash")]
    Crash,
    #[serde(rename = "byzantine-wrong-value")]
    WrongValue,
    #[serde(rename = "byzantine-silent")]
    Silent,
    #[serde(rename = "byzantine-misroute")]
    Misroute,
}

impl FaultKind {
    pub fn byzantine(self) -> Option<ByzantineKind> {
        match self {
            FaultKind::Crash => None,
            FaultKind::WrongValue => Some(ByzantineKind::WrongValue),
            FaultKind::Silent => Some(ByzantineKind::Silent),
            FaultKind::Misroute => Some(ByzantineKind::Misroute),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FaultKind::Crash => "crash",
            FaultKind::WrongValue => "byzantine-wrong-value",
            FaultKind::Silent => "byzantine-silent",
            FaultKind::Misroute => "byzantine-misroute",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub target: NodeAddress,
    pub kind: FaultKind,
    pub at: Tick,
}

/// Which protocol layer a message belongs to. Byzantine behaviours only
/// touch [`Layer::Service`] messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Ring,
    Service,
}

pub trait Payload: Clone + fmt::Debug {
    fn kind(&self) -> &'static str;

    fn layer(&self) -> Layer;

    fn summary(&self) -> String {
        format!("{self:?}")
    }

    /// The message a Byzantine sender of `fault` kind puts on the wire in
    /// place of `self`; `None` drops it.
    fn corrupt(&self, fault: ByzantineKind, me: &NodeAddress, rng: &mut ChaCha8Rng)
        -> Option<Self>;
}

pub trait Actor {
    type Msg: Payload;
    type Timer: Clone + Eq + Hash + fmt::Debug;

    fn on_message(
        &mut self,
        ctx: &mut Ctx<'_, Self::Msg, Self::Timer>,
        from: ActorId,
        msg: Self::Msg,
    );

    fn on_timer(&mut self, ctx: &mut Ctx<'_, Self::Msg, Self::Timer>, timer: Self::Timer);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DelayModel {
    Constant { ticks: Tick },
    Uniform { min: Tick, max: Tick },
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel::Uniform { min: 1, max: 4 }
    }
}

impl DelayModel {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Tick {
        match *self {
            DelayModel::Constant { ticks } => ticks,
            DelayModel::Uniform { min, max } => rng.gen_range(min..=max.max(min)),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("event ceiling of {limit} exceeded at t={at}; suspected livelock")]
    Livelock { limit: u64, at: Tick },
}

#[derive(Debug, Clone)]
pub struct NetConfig {
    pub seed: u64,
    pub delay: DelayModel,
    pub max_events: u64,
    /// Store ring-maintenance sends in the trace (they are always hashed).
    pub keep_ring_records: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            delay: DelayModel::default(),
            max_events: 50_000_000,
            keep_ring_records: false,
        }
    }
}

enum EventBody<M, T> {
    Deliver {
        from: ActorId,
        to: ActorId,
        msg: M,
    },
    Timer {
        owner: ActorId,
        timer: T,
    },
    Fault {
        target: NodeAddress,
        kind: FaultKind,
    },
}

struct Scheduled<M, T> {
    at: Tick,
    seq: u64,
    body: EventBody<M, T>,
}

impl<M, T> PartialEq for Scheduled<M, T> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl<M, T> Eq for Scheduled<M, T> {}
impl<M, T> PartialOrd for Scheduled<M, T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<M, T> Ord for Scheduled<M, T> {
    // min-heap on (at, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Event queue, clock, fault registry and trace shared by all actors.
pub struct Network<M: Payload, T: Clone + Eq + Hash> {
    now: Tick,
    seq: u64,
    queue: BinaryHeap<Scheduled<M, T>>,
    timers: HashMap<(ActorId, T), u64>,
    crashed: HashMap<ActorId, Tick>,
    byzantine: HashMap<ActorId, (ByzantineKind, NodeAddress)>,
    rng: ChaCha8Rng,
    config: NetConfig,
    processed: u64,
    sent: BTreeMap<&'static str, u64>,
    trace: TraceLog,
}

impl<M: Payload, T: Clone + Eq + Hash + fmt::Debug> Network<M, T> {
    pub fn new(config: NetConfig) -> Self {
        Self {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            timers: HashMap::new(),
            crashed: HashMap::new(),
            byzantine: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            processed: 0,
            sent: BTreeMap::new(),
            trace: TraceLog::default(),
        }
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn trace(&self) -> &TraceLog {
        &self.trace
    }

    pub fn into_trace(self) -> TraceLog {
        self.trace
    }

    /// Messages put on the wire so far, by kind.
    pub fn sent_counts(&self) -> &BTreeMap<&'static str, u64> {
        &self.sent
    }

    pub fn events_processed(&self) -> u64 {
        self.processed
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn is_crashed(&self, id: ActorId) -> bool {
        self.crashed.contains_key(&id)
    }

    pub fn crash_time(&self, id: ActorId) -> Option<Tick> {
        self.crashed.get(&id).copied()
    }

    pub fn byzantine_kind(&self, id: ActorId) -> Option<ByzantineKind> {
        self.byzantine.get(&id).map(|(k, _)| *k)
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn push(&mut self, at: Tick, body: EventBody<M, T>) -> u64 {
        let seq = self.next_seq();
        self.queue.push(Scheduled { at, seq, body });
        seq
    }

    /// Enqueues `msg` with a sampled delay. Sends from crashed actors vanish.
    pub fn send(&mut self, from: ActorId, to: ActorId, msg: M) -> Option<Tick> {
        if self.is_crashed(from) {
            return None;
        }
        let mut honest = None;
        let msg = match self.byzantine.get(&from).copied() {
            Some((kind, addr))
                if msg.layer() == Layer::Service || kind == ByzantineKind::Misroute =>
            {
                let out = msg.corrupt(kind, &addr, &mut self.rng);
                let changed = match &out {
                    Some(m) => m.summary() != msg.summary(),
                    None => true,
                };
                if changed {
                    honest = Some(msg.summary());
                }
                match out {
                    Some(m) => m,
                    None => {
                        self.trace.push(
                            TraceRecord {
                                time: self.now,
                                kind: RecordKind::Suppressed,
                                label: msg.kind().to_string(),
                                from: Some(from.0),
                                to: Some(to.0),
                                deliver_at: None,
                                detail: String::new(),
                                honest,
                            },
                            true,
                        );
                        return None;
                    }
                }
            }
            _ => msg,
        };
        *self.sent.entry(msg.kind()).or_default() += 1;
        let delay = self.config.delay.sample(&mut self.rng);
        let at = self.now + delay;
        let keep =
            self.config.keep_ring_records || msg.layer() == Layer::Service || honest.is_some();
        self.trace.push(
            TraceRecord {
                time: self.now,
                kind: RecordKind::Send,
                label: msg.kind().to_string(),
                from: Some(from.0),
                to: Some(to.0),
                deliver_at: Some(at),
                detail: msg.summary(),
                honest,
            },
            keep,
        );
        self.push(at, EventBody::Deliver { from, to, msg });
        Some(at)
    }

    /// Arms `timer` for `owner`; re-arming the same timer replaces it.
    pub fn set_timer(&mut self, owner: ActorId, delay: Tick, timer: T) {
        let at = self.now + delay;
        let seq = self.push(
            at,
            EventBody::Timer {
                owner,
                timer: timer.clone(),
            },
        );
        self.timers.insert((owner, timer), seq);
    }

    /// Unknown timers are ignored.
    pub fn cancel_timer(&mut self, owner: ActorId, timer: &T) {
        self.timers.remove(&(owner, timer.clone()));
    }

    pub fn timer_armed(&self, owner: ActorId, timer: &T) -> bool {
        self.timers.contains_key(&(owner, timer.clone()))
    }

    pub fn schedule_fault(&mut self, spec: FaultSpec) {
        let at = spec.at.max(self.now);
        self.push(
            at,
            EventBody::Fault {
                target: spec.target,
                kind: spec.kind,
            },
        );
    }

    /// Applies a fault immediately.
    pub fn apply_fault(&mut self, target: NodeAddress, kind: FaultKind) {
        match kind.byzantine() {
            None => {
                self.crashed.entry(target.id).or_insert(self.now);
            }
            Some(b) => {
                self.byzantine.insert(target.id, (b, target));
            }
        }
        self.trace.push(
            TraceRecord {
                time: self.now,
                kind: RecordKind::Fault,
                label: kind.label().to_string(),
                from: Some(target.id.0),
                to: None,
                deliver_at: None,
                detail: target.to_string(),
                honest: None,
            },
            true,
        );
    }

    /// Free-form protocol annotation attributed to `who`. Returns the
    /// record's trace position.
    pub fn note(&mut self, who: ActorId, label: &str, detail: String) -> u64 {
        self.trace.push(
            TraceRecord {
                time: self.now,
                kind: RecordKind::Note,
                label: label.to_string(),
                from: Some(who.0),
                to: None,
                deliver_at: None,
                detail,
                honest: None,
            },
            true,
        );
        self.trace.total()
    }
}

/// An actor's handle on the network while one of its handlers runs.
pub struct Ctx<'a, M: Payload, T: Clone + Eq + Hash + fmt::Debug> {
    net: &'a mut Network<M, T>,
    me: ActorId,
}

impl<'a, M: Payload, T: Clone + Eq + Hash + fmt::Debug> Ctx<'a, M, T> {
    pub fn new(net: &'a mut Network<M, T>, me: ActorId) -> Self {
        Self { net, me }
    }

    pub fn me(&self) -> ActorId {
        self.me
    }

    pub fn now(&self) -> Tick {
        self.net.now()
    }

    pub fn send(&mut self, to: ActorId, msg: M) {
        self.net.send(self.me, to, msg);
    }

    pub fn set_timer(&mut self, delay: Tick, timer: T) {
        self.net.set_timer(self.me, delay, timer);
    }

    pub fn cancel_timer(&mut self, timer: &T) {
        self.net.cancel_timer(self.me, timer);
    }

    pub fn timer_armed(&self, timer: &T) -> bool {
        self.net.timer_armed(self.me, timer)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.net.rng()
    }

    pub fn note(&mut self, label: &str, detail: String) -> u64 {
        let me = self.me;
        self.net.note(me, label, detail)
    }
}

/// A population of actors driven by one [`Network`].
pub struct Sim<A: Actor> {
    pub net: Network<A::Msg, A::Timer>,
    pub actors: Vec<A>,
}

impl<A: Actor> Sim<A> {
    pub fn new(config: NetConfig) -> Self {
        Self {
            net: Network::new(config),
            actors: Vec::new(),
        }
    }

    pub fn add(&mut self, actor: A) -> ActorId {
        self.actors.push(actor);
        ActorId(self.actors.len() as u32 - 1)
    }

    pub fn actor(&self, id: ActorId) -> &A {
        &self.actors[id.0 as usize]
    }

    pub fn actor_mut(&mut self, id: ActorId) -> &mut A {
        &mut self.actors[id.0 as usize]
    }

    pub fn now(&self) -> Tick {
        self.net.now
    }

    /// Runs a closure against one actor with a live context, as if an
    /// external stimulus arrived now.
    pub fn with_actor<R>(
        &mut self,
        id: ActorId,
        f: impl FnOnce(&mut A, &mut Ctx<'_, A::Msg, A::Timer>) -> R,
    ) -> R {
        let actor = &mut self.actors[id.0 as usize];
        let mut ctx = Ctx::new(&mut self.net, id);
        f(actor, &mut ctx)
    }

    /// Time of the next pending event, if any.
    pub fn peek_time(&self) -> Option<Tick> {
        self.net.queue.peek().map(|e| e.at)
    }

    /// Processes one event. Returns false when the queue is empty.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let Some(ev) = self.net.queue.pop() else {
            return Ok(false);
        };
        self.net.processed += 1;
        if self.net.processed > self.net.config.max_events {
            return Err(SimError::Livelock {
                limit: self.net.config.max_events,
                at: ev.at,
            });
        }
        debug_assert!(ev.at >= self.net.now);
        self.net.now = ev.at;
        match ev.body {
            EventBody::Deliver { from, to, msg } => {
                if self.net.is_crashed(to) {
                    let keep = self.net.config.keep_ring_records || msg.layer() == Layer::Service;
                    let now = self.net.now;
                    self.net.trace.push(
                        TraceRecord {
                            time: now,
                            kind: RecordKind::Drop,
                            label: msg.kind().to_string(),
                            from: Some(from.0),
                            to: Some(to.0),
                            deliver_at: None,
                            detail: String::new(),
                            honest: None,
                        },
                        keep,
                    );
                    return Ok(true);
                }
                let actor = &mut self.actors[to.0 as usize];
                let mut ctx = Ctx::new(&mut self.net, to);
                actor.on_message(&mut ctx, from, msg);
            }
            EventBody::Timer { owner, timer } => {
                let key = (owner, timer);
                if self.net.timers.get(&key) != Some(&ev.seq) {
                    return Ok(true);
                }
                self.net.timers.remove(&key);
                if self.net.is_crashed(owner) {
                    return Ok(true);
                }
                let actor = &mut self.actors[owner.0 as usize];
                let mut ctx = Ctx::new(&mut self.net, owner);
                actor.on_timer(&mut ctx, key.1);
            }
            EventBody::Fault { target, kind } => {
                self.net.apply_fault(target, kind);
            }
        }
        Ok(true)
    }

    /// Runs every event scheduled at or before `until`.
    pub fn run_until(&mut self, until: Tick) -> Result<(), SimError> {
        while let Some(at) = self.peek_time() {
            if at > until {
                break;
            }
            self.step()?;
        }
        self.net.now = self.net.now.max(until);
        Ok(())
    }

    /// Runs until the queue drains or `until` is reached.
    pub fn run_to_quiescence(&mut self, until: Tick) -> Result<(), SimError> {
        self.run_until(until)
    }
}
