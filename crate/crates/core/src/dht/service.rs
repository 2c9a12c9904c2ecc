//! The replica half of a node: stores calculated-key entries, runs one
//! [`PutStateMachine`] per held `(uid, replica index)`, and answers client
//! operations.
//!
//! Peer addresses are found with ordinary overlay lookups of the peers'
//! calculated keys and cached for a while. Messages wait in an outbox while
//! their destination is being resolved. A peer that receives a message for a
//! replica it does not hold answers `Misdelivered`, which evicts the cached
//! address and makes the next resolution start from a random known node.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::consensus::{ConsensusConfig, Effect, Input, Proposal, ProposalId, PutStateMachine};
use super::store::{Store, StoreEntry};
use crate::keyspace::{Key, KeyRange, KeySpace};
use crate::overlay::{LookupOutcome, Overlay};
use crate::protocol::{Msg, ReqId, Timer};
use crate::simnet::{ActorId, Ctx, NodeAddress, Tick};

/// Lookup tokens issued by the service carry this tag in their low bits.
pub const TOKEN_TAG: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    /// Wait for a consensus round before backing off.
    pub consensus_timeout: Tick,
    pub backoff_min: Tick,
    pub backoff_max: Tick,
    /// Stalled rounds before registered clients are told the put failed.
    pub max_retries: u32,
    /// How long a resolved peer address is trusted.
    pub peer_ttl: Tick,
    /// Replaces the `f+1` commit quorum. Lowering it breaks safety; it exists
    /// so the oracles can be shown to catch a broken build.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub commit_threshold: Option<usize>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            consensus_timeout: 60,
            backoff_min: 10,
            backoff_max: 60,
            max_retries: 8,
            peer_ttl: 200,
            commit_threshold: None,
        }
    }
}

/// A version decided by consensus on this node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Decision {
    pub time: Tick,
    pub uid: Key,
    pub index: usize,
    pub version: u64,
    pub id: ProposalId,
    pub value: Vec<u8>,
    /// Trace position of the `decide` note.
    pub position: u64,
}

type Slot = (Key, usize);

#[derive(Debug, Clone)]
pub struct Replica {
    ks: KeySpace,
    r: usize,
    config: ServiceConfig,
    consensus: ConsensusConfig,
    store: Store,
    machines: BTreeMap<Slot, PutStateMachine>,
    peers: BTreeMap<Slot, (NodeAddress, Tick)>,
    outbox: BTreeMap<Slot, Vec<Msg>>,
    resolving: BTreeMap<u64, Slot>,
    detour: BTreeSet<Slot>,
    clients: BTreeMap<(ProposalId, usize), Vec<(ActorId, ReqId)>>,
    behind_sent: BTreeSet<(Slot, u64, ActorId)>,
    decisions: Vec<Decision>,
    naive: BTreeMap<Key, (Vec<u8>, u64)>,
    next_token: u64,
}

impl Replica {
    pub fn new(ks: KeySpace, f: usize, config: ServiceConfig) -> Self {
        let mut consensus = ConsensusConfig {
            max_retries: config.max_retries,
            ..ConsensusConfig::new(f)
        };
        if let Some(c) = config.commit_threshold {
            consensus.thresholds.commits = c;
        }
        Self {
            ks,
            r: consensus.thresholds.replicas,
            config,
            consensus,
            store: Store::default(),
            machines: BTreeMap::new(),
            peers: BTreeMap::new(),
            outbox: BTreeMap::new(),
            resolving: BTreeMap::new(),
            detour: BTreeSet::new(),
            clients: BTreeMap::new(),
            behind_sent: BTreeSet::new(),
            decisions: Vec::new(),
            naive: BTreeMap::new(),
            next_token: 0,
        }
    }

    pub fn replication(&self) -> usize {
        self.r
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.decisions
    }

    pub fn machine(&self, uid: Key, index: usize) -> Option<&PutStateMachine> {
        self.machines.get(&(uid, index))
    }

    /// Entries of the naive baseline, `uid -> (value, version)`.
    pub fn naive_store(&self) -> &BTreeMap<Key, (Vec<u8>, u64)> {
        &self.naive
    }

    fn calculated(&self, uid: Key, index: usize) -> Key {
        self.ks.replica_key(uid, index, self.r)
    }

    fn holds(&self, ov: &Overlay, uid: Key, index: usize) -> bool {
        index < self.r && ov.owns(self.calculated(uid, index))
    }

    fn machine_mut(&mut self, uid: Key, index: usize) -> &mut PutStateMachine {
        let store = &self.store;
        let consensus = self.consensus;
        self.machines.entry((uid, index)).or_insert_with(|| {
            let mut m = PutStateMachine::new(uid, index, consensus);
            if let Some(e) = store.get(uid, index) {
                // A fresh machine has nothing in flight, so there is nothing to act on.
                let _ = m.fast_forward(e.version, e.id);
            }
            m
        })
    }

    fn token(&mut self) -> u64 {
        self.next_token += 1;
        (self.next_token << 2) | TOKEN_TAG
    }

    fn send_peer(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        ov: &mut Overlay,
        uid: Key,
        index: usize,
        msg: Msg,
    ) {
        let slot = (uid, index);
        if let Some((addr, at)) = self.peers.get(&slot) {
            if ctx.now() < at + self.config.peer_ttl {
                ctx.send(addr.id, msg);
                return;
            }
            self.peers.remove(&slot);
        }
        self.outbox.entry(slot).or_default().push(msg);
        if self.resolving.values().any(|s| *s == slot) {
            return;
        }
        let token = self.token();
        self.resolving.insert(token, slot);
        let detour = self.detour.remove(&slot);
        ov.lookup(ctx, self.calculated(uid, index), token, detour);
    }

    /// Completion of a peer resolution started by this service.
    pub fn on_lookup(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, out: LookupOutcome<u64>) {
        let Some(slot) = self.resolving.remove(&out.tag) else {
            return;
        };
        let queued = self.outbox.remove(&slot).unwrap_or_default();
        match out.result {
            Ok(owner) => {
                self.peers.insert(slot, (owner, ctx.now()));
                for m in queued {
                    ctx.send(owner.id, m);
                }
            }
            Err(e) => {
                self.detour.insert(slot);
                ctx.note(
                    "peer-unresolved",
                    format!(
                        "uid={} idx={} {e:?} dropped={}",
                        slot.0,
                        slot.1,
                        queued.len()
                    ),
                );
            }
        }
    }

    fn register(&mut self, id: ProposalId, index: usize, client: ActorId, req: ReqId) {
        let list = self.clients.entry((id, index)).or_default();
        if !list.contains(&(client, req)) {
            list.push((client, req));
        }
    }

    fn ack(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        uid: Key,
        index: usize,
        id: ProposalId,
        version: u64,
    ) {
        for (client, req) in self.clients.remove(&(id, index)).unwrap_or_default() {
            ctx.send(
                client,
                Msg::PutAck {
                    req,
                    index,
                    uid,
                    id,
                    version,
                },
            );
        }
    }

    fn apply(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        ov: &mut Overlay,
        uid: Key,
        index: usize,
        effects: Vec<Effect>,
    ) {
        for e in effects {
            match e {
                Effect::Vote {
                    slot,
                    round,
                    proposal,
                } => {
                    for j in (0..self.r).filter(|&j| j != index) {
                        let msg = Msg::Vote {
                            uid,
                            from: index,
                            to: j,
                            slot,
                            round,
                            proposal: proposal.clone(),
                        };
                        self.send_peer(ctx, ov, uid, j, msg);
                    }
                }
                Effect::Commit { slot, proposal } => {
                    for j in (0..self.r).filter(|&j| j != index) {
                        let msg = Msg::Commit {
                            uid,
                            from: index,
                            to: j,
                            slot,
                            proposal: proposal.clone(),
                        };
                        self.send_peer(ctx, ov, uid, j, msg);
                    }
                }
                Effect::Decided { slot, proposal } => self.decided(ctx, index, slot, proposal),
                Effect::AlreadyDecided { version, id } => self.ack(ctx, uid, index, id, version),
                Effect::ArmTimeout { slot, round } => ctx.set_timer(
                    self.config.consensus_timeout,
                    Timer::Consensus {
                        uid,
                        index,
                        slot,
                        round,
                    },
                ),
                Effect::StartBackoff { slot, round } => {
                    let lo = self.config.backoff_min;
                    let wait = ctx.rng().gen_range(lo..=self.config.backoff_max.max(lo));
                    ctx.note(
                        "backoff",
                        format!("uid={uid} idx={index} slot={slot} round={round} wait={wait}"),
                    );
                    // Peers may have moved; resolve them afresh for the next round.
                    for j in 0..self.r {
                        self.peers.remove(&(uid, j));
                    }
                    ctx.set_timer(
                        wait,
                        Timer::Backoff {
                            uid,
                            index,
                            slot,
                            round,
                        },
                    );
                }
                Effect::GiveUp { slot, proposals } => {
                    ctx.note(
                        "give-up",
                        format!(
                            "uid={uid} idx={index} slot={slot} proposals={}",
                            proposals.len()
                        ),
                    );
                    for id in proposals {
                        for (client, req) in self.clients.remove(&(id, index)).unwrap_or_default() {
                            ctx.send(
                                client,
                                Msg::PutFailed {
                                    req,
                                    index,
                                    uid,
                                    id,
                                },
                            );
                        }
                    }
                }
            }
        }
    }

    fn decided(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, index: usize, slot: u64, p: Proposal) {
        let uid = p.uid;
        let position = ctx.note(
            "decide",
            format!(
                "uid={uid} idx={index} v={slot} id={} value={}",
                p.id,
                hex::encode(&p.value)
            ),
        );
        self.store.write(StoreEntry {
            calculated: self.calculated(uid, index),
            uid,
            index,
            value: p.value.clone(),
            version: slot,
            id: Some(p.id),
        });
        self.decisions.push(Decision {
            time: ctx.now(),
            uid,
            index,
            version: slot,
            id: p.id,
            value: p.value,
            position,
        });
        self.ack(ctx, uid, index, p.id, slot);
    }

    fn feed(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        ov: &mut Overlay,
        uid: Key,
        index: usize,
        input: Input,
    ) {
        let effects = self.machine_mut(uid, index).handle(input);
        self.apply(ctx, ov, uid, index, effects);
    }

    /// Handles peer traffic arriving at a stale or future version. Returns
    /// true when the message needs no further processing. Only stale votes
    /// are answered; answering stale commits would let two decided replicas
    /// bounce commits between them forever.
    #[allow(clippy::too_many_arguments)]
    fn catch_up(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        from: ActorId,
        uid: Key,
        me: usize,
        peer: usize,
        slot: u64,
        answer_stale: bool,
    ) -> bool {
        let m = self.machine_mut(uid, me);
        let current = m.slot();
        if slot < current {
            // The peer is behind. Re-sending our commit for a decided version
            // is safe: its decision was already backed by f+1 commits.
            if let Some(p) = m.history().get(&slot).filter(|_| answer_stale).cloned() {
                ctx.send(
                    from,
                    Msg::Commit {
                        uid,
                        from: me,
                        to: peer,
                        slot,
                        proposal: p,
                    },
                );
            }
            return true;
        }
        if slot > current && self.behind_sent.insert(((uid, me), current, from)) {
            ctx.send(
                from,
                Msg::Behind {
                    uid,
                    from: me,
                    to: peer,
                    slot: current,
                },
            );
        }
        false
    }

    /// Writes an entry learned outside consensus and moves the local machine
    /// past it. `endorsed` copies were matched by f+1 replicas and may replace
    /// a differing value of the same version; others only add newer versions.
    pub fn install(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        ov: &mut Overlay,
        entry: StoreEntry,
        endorsed: bool,
    ) -> bool {
        let (uid, index, version, id) = (entry.uid, entry.index, entry.version, entry.id);
        let changed = if endorsed {
            self.store.write(entry)
        } else {
            self.store.offer(entry)
        };
        if !changed {
            return false;
        }
        if let Some(m) = self.machines.get_mut(&(uid, index)) {
            let effects = m.fast_forward(version, id);
            self.apply(ctx, ov, uid, index, effects);
        }
        if let Some(id) = id {
            self.ack(ctx, uid, index, id, version);
        }
        true
    }

    /// Stops acting as a replica for everything in `range` and returns the
    /// entries stored there. The entries stay in the store until [`Self::drop_entries`].
    pub fn release(&mut self, range: &KeyRange) -> Vec<StoreEntry> {
        let ks = self.ks;
        let r = self.r;
        self.machines
            .retain(|(uid, index), _| !ks.contains(range, ks.replica_key(*uid, *index, r)));
        self.store.in_range(&ks, range).cloned().collect()
    }

    /// Deletes the given entries unless this node owns them again.
    pub fn drop_entries(&mut self, ov: &Overlay, entries: &[(Key, usize)]) -> usize {
        let mut n = 0;
        for &(uid, index) in entries {
            if !self.holds(ov, uid, index) && self.store.remove(uid, index).is_some() {
                n += 1;
            }
        }
        n
    }

    /// Handles a service message. Returns false for anything else.
    pub fn on_message(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        ov: &mut Overlay,
        from: ActorId,
        msg: &Msg,
    ) -> bool {
        match msg {
            Msg::Put {
                req,
                index,
                proposal,
            } => {
                let (uid, index) = (proposal.uid, *index);
                if !self.holds(ov, uid, index) {
                    ctx.send(
                        from,
                        Msg::WrongReplica {
                            req: *req,
                            index,
                            uid,
                        },
                    );
                    return true;
                }
                self.register(proposal.id, index, from, *req);
                self.feed(ctx, ov, uid, index, Input::Put(proposal.clone()));
            }
            Msg::Get { req, index, uid } => {
                let (req, index, uid) = (*req, *index, *uid);
                if !self.holds(ov, uid, index) {
                    ctx.send(from, Msg::WrongReplica { req, index, uid });
                    return true;
                }
                let reply = match self.store.get(uid, index) {
                    Some(e) => Msg::GetAck {
                        req,
                        index,
                        uid,
                        value: e.value.clone(),
                        version: e.version,
                    },
                    None => Msg::NotFound { req, index, uid },
                };
                ctx.send(from, reply);
            }
            Msg::Vote {
                uid,
                from: peer,
                to,
                slot,
                round,
                proposal,
            } => {
                let (uid, peer, me) = (*uid, *peer, *to);
                if peer >= self.r || peer == me || proposal.uid != uid {
                    return true;
                }
                if !self.holds(ov, uid, me) {
                    ctx.send(from, Msg::Misdelivered { uid, index: me });
                    return true;
                }
                if self.catch_up(ctx, from, uid, me, peer, *slot, true) {
                    return true;
                }
                let input = Input::Vote {
                    from: peer,
                    slot: *slot,
                    round: *round,
                    proposal: proposal.clone(),
                };
                self.feed(ctx, ov, uid, me, input);
            }
            Msg::Commit {
                uid,
                from: peer,
                to,
                slot,
                proposal,
            } => {
                let (uid, peer, me) = (*uid, *peer, *to);
                if peer >= self.r || peer == me || proposal.uid != uid {
                    return true;
                }
                if !self.holds(ov, uid, me) {
                    ctx.send(from, Msg::Misdelivered { uid, index: me });
                    return true;
                }
                if self.catch_up(ctx, from, uid, me, peer, *slot, false) {
                    return true;
                }
                let input = Input::Commit {
                    from: peer,
                    slot: *slot,
                    proposal: proposal.clone(),
                };
                self.feed(ctx, ov, uid, me, input);
            }
            Msg::Behind {
                uid,
                from: peer,
                to,
                slot,
            } => {
                let (uid, peer, me) = (*uid, *peer, *to);
                if peer >= self.r || peer == me || !self.holds(ov, uid, me) {
                    return true;
                }
                if let Some(m) = self.machines.get(&(uid, me)) {
                    for (&s, p) in m.history().range(*slot..) {
                        ctx.send(
                            from,
                            Msg::Commit {
                                uid,
                                from: me,
                                to: peer,
                                slot: s,
                                proposal: p.clone(),
                            },
                        );
                    }
                }
            }
            Msg::Misdelivered { uid, index } => {
                let slot = (*uid, *index);
                if self.peers.get(&slot).is_some_and(|(a, _)| a.id == from) {
                    self.peers.remove(&slot);
                    self.detour.insert(slot);
                }
            }
            Msg::NaivePut { req, uid, value } => {
                let (req, uid) = (*req, *uid);
                if !ov.owns(uid) {
                    ctx.send(from, Msg::WrongReplica { req, index: 0, uid });
                    return true;
                }
                let version = self.naive.get(&uid).map_or(0, |(_, v)| *v) + 1;
                self.naive.insert(uid, (value.clone(), version));
                let succ = ov.state().successor();
                if succ.id != ov.me().id {
                    ctx.send(
                        succ.id,
                        Msg::NaiveReplicate {
                            uid,
                            value: value.clone(),
                            version,
                        },
                    );
                }
                ctx.send(from, Msg::NaiveAck { req, uid, version });
            }
            Msg::NaiveReplicate {
                uid,
                value,
                version,
            } => {
                if self.naive.get(uid).is_none_or(|(_, v)| v < version) {
                    self.naive.insert(*uid, (value.clone(), *version));
                }
            }
            Msg::NaiveGet { req, uid } => {
                let (req, uid) = (*req, *uid);
                if !ov.owns(uid) {
                    ctx.send(from, Msg::WrongReplica { req, index: 0, uid });
                    return true;
                }
                let reply = match self.naive.get(&uid) {
                    Some((value, version)) => Msg::GetAck {
                        req,
                        index: 0,
                        uid,
                        value: value.clone(),
                        version: *version,
                    },
                    None => Msg::NotFound { req, index: 0, uid },
                };
                ctx.send(from, reply);
            }
            _ => return false,
        }
        true
    }

    /// Handles a consensus timer. Returns false for anything else.
    pub fn on_timer(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        ov: &mut Overlay,
        timer: &Timer,
    ) -> bool {
        let (uid, index, input) = match *timer {
            Timer::Consensus {
                uid,
                index,
                slot,
                round,
            } => (uid, index, Input::Timeout { slot, round }),
            Timer::Backoff {
                uid,
                index,
                slot,
                round,
            } => (uid, index, Input::BackoffElapsed { slot, round }),
            _ => return false,
        };
        if self.machines.contains_key(&(uid, index)) {
            self.feed(ctx, ov, uid, index, input);
        }
        true
    }
}
