//! Chord routing: iterative lookup, join, stabilization and keyspace upcalls.
//!
//! An [`Overlay`] is the ring half of a node. It answers find-successor
//! queries from its [`RoutingState`], keeps that state fresh with periodic
//! stabilization, and reports two kinds of events to the service hosted on
//! the same node: responsibility changes ([`KeyspaceChange`]) and completed
//! lookups started on the service's behalf.

mod lookup;
mod routing;

use std::collections::BTreeMap;

use rand::seq::IteratorRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use lookup::{LookupError, LookupOutcome, Lookups};
pub use routing::{oracle_owner, settled, RoutingState};

use crate::keyspace::{Key, KeyRange, KeySpace};
use crate::protocol::{Msg, Purpose, Timer};
use crate::simnet::{ActorId, Ctx, NodeAddress, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlayConfig {
    /// Successor list length.
    pub successors: usize,
    /// Ticks between stabilization rounds; 0 disables maintenance.
    pub stabilize_every: Tick,
    /// Wait before a ring request is retried, and again before its target is
    /// declared dead.
    pub ring_timeout: Tick,
    /// Wait for each lookup hop before retrying it.
    pub hop_timeout: Tick,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self {
            successors: 8,
            stabilize_every: 10,
            ring_timeout: 10,
            hop_timeout: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "range", rename_all = "kebab-case")]
pub enum KeyspaceChange {
    Release(KeyRange),
    TakeOver(KeyRange),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LookupTag {
    Join,
    Finger(usize),
    Service(u64),
}

#[derive(Debug, Clone)]
pub enum OverlayEvent {
    Change(KeyspaceChange),
    /// A lookup started with [`Overlay::lookup`] finished; carries its token.
    Lookup(LookupOutcome<u64>),
    Joined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Probe {
    Neighbors,
    Predecessor,
}

#[derive(Debug, Clone, Copy)]
struct Outstanding {
    probe: Probe,
    to: NodeAddress,
    tries: u8,
}

#[derive(Debug, Clone)]
pub struct Overlay {
    ks: KeySpace,
    config: OverlayConfig,
    state: RoutingState,
    lookups: Lookups<LookupTag>,
    probes: BTreeMap<u64, Outstanding>,
    next_nonce: u64,
    next_finger: usize,
    joining: bool,
    events: Vec<OverlayEvent>,
    changes: Vec<(Tick, KeyspaceChange)>,
}

impl Overlay {
    pub fn new(ks: KeySpace, config: OverlayConfig, state: RoutingState) -> Self {
        Self {
            ks,
            config,
            lookups: Lookups::new(ks, config.hop_timeout),
            state,
            probes: BTreeMap::new(),
            next_nonce: 0,
            next_finger: 0,
            joining: false,
            events: Vec::new(),
            changes: Vec::new(),
        }
    }

    pub fn keyspace(&self) -> &KeySpace {
        &self.ks
    }

    pub fn state(&self) -> &RoutingState {
        &self.state
    }

    pub fn me(&self) -> NodeAddress {
        self.state.me
    }

    pub fn owns(&self, k: Key) -> bool {
        self.state.owns(&self.ks, k)
    }

    pub fn is_joined(&self) -> bool {
        self.state.lower.is_some() || !self.state.succs.is_empty()
    }

    /// Every upcall emitted so far, with its time.
    pub fn change_log(&self) -> &[(Tick, KeyspaceChange)] {
        &self.changes
    }

    pub fn take_events(&mut self) -> Vec<OverlayEvent> {
        std::mem::take(&mut self.events)
    }

    /// Arms periodic maintenance, first firing after `phase` ticks.
    pub fn start_maintenance(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, phase: Tick) {
        if self.config.stabilize_every > 0 {
            ctx.set_timer(phase.max(1), Timer::Stabilize);
        }
    }

    /// Joins the ring known to `bootstrap`.
    pub fn join(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, bootstrap: NodeAddress) {
        self.joining = true;
        let me = self.state.me.key;
        self.lookups
            .start(ctx, bootstrap, me, Purpose::Maintenance, LookupTag::Join);
    }

    /// Looks up the owner of `target` for the co-located service. The result
    /// arrives as [`OverlayEvent::Lookup`] carrying `token`. With `detour`
    /// the first hop is a random known node instead of local routing state,
    /// which sidesteps a bad route on retry.
    pub fn lookup(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, target: Key, token: u64, detour: bool) {
        let tag = LookupTag::Service(token);
        let known = self.state.known();
        let entry = if detour {
            known.iter().copied().choose(ctx.rng())
        } else {
            None
        };
        match entry {
            Some(entry) => {
                self.lookups
                    .start(ctx, entry, target, Purpose::Service, tag);
            }
            None => {
                let first = self.state.hop(&self.ks, target);
                let me = self.state.me;
                if let Some(out) =
                    self.lookups
                        .start_local(ctx, me, first, target, Purpose::Service, tag)
                {
                    self.finished(ctx, out);
                }
            }
        }
    }

    fn nonce(&mut self) -> u64 {
        self.next_nonce += 1;
        self.next_nonce
    }

    fn probe(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, probe: Probe, to: NodeAddress) {
        let nonce = self.nonce();
        self.probes.insert(
            nonce,
            Outstanding {
                probe,
                to,
                tries: 0,
            },
        );
        self.send_probe(ctx, nonce);
    }

    fn send_probe(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, nonce: u64) {
        let p = self.probes.get_mut(&nonce).expect("probe");
        p.tries += 1;
        let msg = match p.probe {
            Probe::Neighbors => Msg::GetNeighbors { nonce },
            Probe::Predecessor => Msg::Ping { nonce },
        };
        ctx.send(p.to.id, msg);
        ctx.set_timer(self.config.ring_timeout, Timer::RingRequest(nonce));
    }

    fn set_pred(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, p: NodeAddress) {
        self.state.pred = Some(p);
        let me = self.state.me.key;
        let change = match self.state.lower {
            None => Some(KeyspaceChange::TakeOver(KeyRange::new(p.key, me))),
            Some(old) => match self.ks.range_delta(me, old, p.key) {
                Some(Ok(gained)) => Some(KeyspaceChange::TakeOver(gained)),
                Some(Err(lost)) => Some(KeyspaceChange::Release(lost)),
                None => None,
            },
        };
        self.state.lower = Some(p.key);
        if let Some(c) = change {
            let detail = match c {
                KeyspaceChange::Release(r) => format!("release ({},{}]", r.lower, r.upper),
                KeyspaceChange::TakeOver(r) => format!("take-over ({},{}]", r.lower, r.upper),
            };
            ctx.note("keyspace-change", detail);
            self.changes.push((ctx.now(), c));
            self.events.push(OverlayEvent::Change(c));
        }
    }

    fn forget(&mut self, dead: ActorId) {
        self.state.forget(dead);
    }

    fn finished(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, out: LookupOutcome<LookupTag>) {
        for s in &out.suspects {
            self.forget(s.id);
        }
        match out.tag {
            LookupTag::Join => {
                self.joining = false;
                match out.result {
                    Ok(succ) if succ.id != self.state.me.id => {
                        self.state.succs = vec![succ];
                        ctx.note("joined", format!("successor {}", succ.key));
                        self.events.push(OverlayEvent::Joined);
                    }
                    _ => {
                        ctx.note("join-failed", String::new());
                    }
                }
            }
            LookupTag::Finger(i) => {
                if let Ok(owner) = out.result {
                    self.state.fingers[i] = Some(owner);
                }
            }
            LookupTag::Service(token) => self.events.push(OverlayEvent::Lookup(LookupOutcome {
                tag: token,
                target: out.target,
                result: out.result,
                path: out.path,
                suspects: out.suspects,
                started: out.started,
            })),
        }
    }

    fn stabilize(&mut self, ctx: &mut Ctx<'_, Msg, Timer>) {
        ctx.set_timer(self.config.stabilize_every, Timer::Stabilize);
        if !self.is_joined() {
            return;
        }
        let me = self.state.me;
        if self.state.succs.is_empty() {
            if let Some(p) = self.state.pred {
                self.state.succs = vec![p];
            }
        }
        let succ = self.state.successor();
        let busy = |probe: Probe, probes: &BTreeMap<u64, Outstanding>| {
            probes.values().any(|o| o.probe == probe)
        };
        if succ.id != me.id && !busy(Probe::Neighbors, &self.probes) {
            self.probe(ctx, Probe::Neighbors, succ);
        }
        if let Some(p) = self.state.pred {
            if p.id != me.id && !busy(Probe::Predecessor, &self.probes) {
                self.probe(ctx, Probe::Predecessor, p);
            }
        }
        if succ.id != me.id {
            let i = self.next_finger;
            self.next_finger = (self.next_finger + 1) % self.state.fingers.len();
            let target = self
                .ks
                .finger_target(me.key, i as u32 + 1)
                .expect("finger index");
            let first = self.state.hop(&self.ks, target);
            if let Some(out) = self.lookups.start_local(
                ctx,
                me,
                first,
                target,
                Purpose::Maintenance,
                LookupTag::Finger(i),
            ) {
                self.finished(ctx, out);
            }
        }
    }

    /// Handles a ring-layer message. Returns false for anything else.
    pub fn on_message(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, from: ActorId, msg: &Msg) -> bool {
        let me = self.state.me;
        match msg {
            Msg::FindSuccessor {
                query,
                target,
                purpose,
            } => {
                let hop = self.state.hop(&self.ks, *target);
                ctx.send(
                    from,
                    Msg::FoundHop {
                        query: *query,
                        purpose: *purpose,
                        hop,
                    },
                );
            }
            Msg::FoundHop { query, hop, .. } => {
                if let Some(out) = self.lookups.on_hop(ctx, *query, from, hop.clone()) {
                    self.finished(ctx, out);
                }
            }
            Msg::GetNeighbors { nonce } => {
                ctx.send(
                    from,
                    Msg::Neighbors {
                        nonce: *nonce,
                        pred: self.state.pred,
                        succs: self.state.succs.clone(),
                    },
                );
            }
            Msg::Neighbors { nonce, pred, succs } => {
                let Some(o) = self.probes.remove(nonce) else {
                    return true;
                };
                ctx.cancel_timer(&Timer::RingRequest(*nonce));
                let s = o.to;
                match pred {
                    Some(p) if p.id != me.id && self.ks.between_open(me.key, s.key, p.key) => {
                        let mut rest = vec![s];
                        rest.extend(succs.iter().copied());
                        self.state
                            .adopt_successors(*p, &rest, self.config.successors);
                    }
                    _ => self
                        .state
                        .adopt_successors(s, succs, self.config.successors),
                }
                let succ = self.state.successor();
                if succ.id != me.id {
                    ctx.send(succ.id, Msg::Notify { candidate: me });
                }
            }
            Msg::Notify { candidate } => {
                let c = *candidate;
                if c.id == me.id {
                    return true;
                }
                if self.state.succs.is_empty() {
                    self.state.succs = vec![c];
                }
                let better = match self.state.pred {
                    None => true,
                    Some(p) => p.id == me.id || self.ks.between_open(p.key, me.key, c.key),
                };
                if better && self.state.pred.map(|p| p.id) != Some(c.id) {
                    self.set_pred(ctx, c);
                }
            }
            Msg::Ping { nonce } => ctx.send(from, Msg::Pong { nonce: *nonce }),
            Msg::Pong { nonce } => {
                if self.probes.remove(nonce).is_some() {
                    ctx.cancel_timer(&Timer::RingRequest(*nonce));
                }
            }
            _ => return false,
        }
        true
    }

    /// Handles a ring timer. Returns false for anything else.
    pub fn on_timer(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, timer: &Timer) -> bool {
        match timer {
            Timer::Stabilize => self.stabilize(ctx),
            Timer::RingRequest(nonce) => {
                let Some(o) = self.probes.get(nonce).copied() else {
                    return true;
                };
                if o.tries < 2 {
                    self.send_probe(ctx, *nonce);
                } else {
                    self.probes.remove(nonce);
                    ctx.note("suspect", format!("{} unresponsive", o.to.key));
                    self.forget(o.to.id);
                }
            }
            Timer::LookupHop(query) => {
                if let Some(out) = self.lookups.on_timeout(ctx, *query) {
                    self.finished(ctx, out);
                }
            }
            _ => return false,
        }
        true
    }

    /// Random phase so that nodes do not stabilize in lockstep.
    pub fn random_phase(&self, ctx: &mut Ctx<'_, Msg, Timer>) -> Tick {
        let p = self.config.stabilize_every.max(1);
        ctx.rng().gen_range(1..=p)
    }
}

#[cfg(test)]
mod tests;
