//! Replication-aware client.
//!
//! A client resolves the peer set of a key itself: one lookup per replica
//! index, each entering the ring at a different node, so a single faulty
//! router cannot sit on every path. Operations fan out to every resolved
//! replica and complete on `f+1` matching replies. Puts retry with the same
//! proposal id, which makes retries idempotent.
//!
//! In naive mode the client instead talks only to the primary for a key, the
//! way plain successor replication on Chord would.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::dht::consensus::{Proposal, ProposalId};
use crate::dht::store::value_digest;
use crate::keyspace::{Key, KeySpace};
use crate::overlay::{LookupOutcome, Lookups};
use crate::protocol::{Msg, Purpose, ReqId, Timer};
use crate::simnet::{ActorId, Ctx, NodeAddress, Tick};

/// How many times one replica index may be re-resolved within an attempt.
const MAX_RERESOLVE: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    /// Ticks an attempt may take before it is retried.
    pub op_timeout: Tick,
    pub max_attempts: u32,
    /// Matching put acknowledgements required. `None` means `f+1`.
    pub ack_bar: Option<usize>,
    /// Contact only the primary, as plain successor replication would.
    pub naive: bool,
    /// Wait for each lookup hop before retrying it.
    pub hop_timeout: Tick,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            op_timeout: 300,
            max_attempts: 4,
            ack_bar: None,
            naive: false,
            hop_timeout: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Op {
    Put { key: Key, value: String },
    Get { key: Key },
}

impl Op {
    pub fn key(&self) -> Key {
        match self {
            Op::Put { key, .. } | Op::Get { key } => *key,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "result", rename_all = "kebab-case")]
pub enum OpResult {
    Stored {
        version: u64,
    },
    Found {
        value: String,
        version: u64,
    },
    NotFound,
    /// Every attempt ran out of time.
    Timeout,
    /// `f+1` replicas reported that consensus gave up.
    Failed,
}

impl OpResult {
    pub fn is_success(&self) -> bool {
        matches!(
            self,
            OpResult::Stored { .. } | OpResult::Found { .. } | OpResult::NotFound
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OpOutcome {
    pub client: u32,
    /// Position of the operation in the client's script.
    pub seq: usize,
    #[serde(flatten)]
    pub op: Op,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<ProposalId>,
    pub start: Tick,
    pub end: Tick,
    pub attempts: u32,
    #[serde(flatten)]
    pub result: OpResult,
    /// Total lookup hops spent resolving replicas.
    pub hops: usize,
    /// Entry node used for each replica index in the last attempt.
    pub entries: Vec<ActorId>,
    /// Trace position of the `op-done` note.
    pub position: u64,
}

#[derive(Debug, Clone)]
pub struct ScriptedOp {
    pub at: Tick,
    pub op: Op,
}

/// Reply fingerprint; `None` stands for not-found.
type Fingerprint = Option<([u8; 16], u64)>;

#[derive(Debug, Clone)]
struct InFlight {
    seq: usize,
    id: Option<ProposalId>,
    attempt: u32,
    req: ReqId,
    start: Tick,
    base: usize,
    resolved: Vec<Option<NodeAddress>>,
    reresolved: Vec<u32>,
    entries: Vec<ActorId>,
    acks: BTreeMap<(ProposalId, u64), BTreeSet<usize>>,
    replies: BTreeMap<Fingerprint, BTreeSet<usize>>,
    values: BTreeMap<Fingerprint, Vec<u8>>,
    answered: BTreeSet<usize>,
    failed: BTreeSet<usize>,
    hops: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Tag {
    seq: usize,
    attempt: u32,
    index: usize,
}

#[derive(Debug, Clone)]
pub struct Client {
    id: u32,
    ks: KeySpace,
    f: usize,
    r: usize,
    config: ClientConfig,
    entries: Vec<NodeAddress>,
    script: Vec<ScriptedOp>,
    queue: VecDeque<usize>,
    current: Option<InFlight>,
    lookups: Lookups<Tag>,
    outcomes: Vec<OpOutcome>,
    counter: u64,
    proposals: Vec<(ProposalId, usize)>,
    next_req: ReqId,
    rotation: usize,
}

impl Client {
    pub fn new(
        id: u32,
        ks: KeySpace,
        f: usize,
        config: ClientConfig,
        entries: Vec<NodeAddress>,
        script: Vec<ScriptedOp>,
    ) -> Self {
        assert!(
            !entries.is_empty(),
            "a client needs at least one entry node"
        );
        Self {
            id,
            ks,
            f,
            r: 3 * f + 1,
            lookups: Lookups::new(ks, config.hop_timeout),
            config,
            entries,
            script,
            queue: VecDeque::new(),
            current: None,
            outcomes: Vec::new(),
            counter: 0,
            proposals: Vec::new(),
            next_req: 0,
            rotation: id as usize,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn outcomes(&self) -> &[OpOutcome] {
        &self.outcomes
    }

    pub fn script(&self) -> &[ScriptedOp] {
        &self.script
    }

    /// Proposal ids issued so far, with the script position they carry.
    pub fn proposals(&self) -> &[(ProposalId, usize)] {
        &self.proposals
    }

    /// True once every scripted operation has an outcome.
    pub fn finished(&self) -> bool {
        self.outcomes.len() == self.script.len()
    }

    /// Arms one start timer per scripted operation.
    pub fn schedule(&self, ctx: &mut Ctx<'_, Msg, Timer>) {
        let now = ctx.now();
        for (n, s) in self.script.iter().enumerate() {
            ctx.set_timer(s.at.saturating_sub(now), Timer::ClientStart(n));
        }
    }

    fn ack_bar(&self) -> usize {
        self.config.ack_bar.unwrap_or(self.f + 1)
    }

    fn entry(&self, base: usize, offset: usize) -> NodeAddress {
        self.entries[(base + offset) % self.entries.len()]
    }

    fn start_next(&mut self, ctx: &mut Ctx<'_, Msg, Timer>) {
        if self.current.is_some() {
            return;
        }
        let Some(seq) = self.queue.pop_front() else {
            return;
        };
        let id = match self.script[seq].op {
            Op::Put { .. } if !self.config.naive => {
                self.counter += 1;
                let id = ProposalId {
                    client: self.id,
                    counter: self.counter,
                };
                self.proposals.push((id, seq));
                Some(id)
            }
            _ => None,
        };
        let base = self.rotation;
        self.rotation += self.r;
        self.current = Some(InFlight {
            seq,
            id,
            attempt: 0,
            req: 0,
            start: ctx.now(),
            base,
            resolved: Vec::new(),
            reresolved: Vec::new(),
            entries: Vec::new(),
            acks: BTreeMap::new(),
            replies: BTreeMap::new(),
            values: BTreeMap::new(),
            answered: BTreeSet::new(),
            failed: BTreeSet::new(),
            hops: 0,
        });
        self.begin_attempt(ctx);
    }

    fn begin_attempt(&mut self, ctx: &mut Ctx<'_, Msg, Timer>) {
        self.next_req += 1;
        let req = self.next_req;
        let width = if self.config.naive { 1 } else { self.r };
        let cur = self.current.as_mut().expect("operation in flight");
        cur.attempt += 1;
        cur.req = req;
        cur.resolved = vec![None; width];
        cur.reresolved = vec![0; width];
        cur.entries = vec![ActorId(u32::MAX); width];
        cur.acks.clear();
        cur.replies.clear();
        cur.values.clear();
        cur.answered.clear();
        cur.failed.clear();
        let (seq, attempt) = (cur.seq, cur.attempt);
        ctx.set_timer(
            self.config.op_timeout,
            Timer::ClientAttempt {
                op: seq as u64,
                attempt,
            },
        );
        for index in 0..width {
            self.resolve(ctx, index, 0);
        }
    }

    /// Looks up replica `index` of the current key, entering the ring at a
    /// node chosen by round-robin.
    fn resolve(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, index: usize, retry: u32) {
        let cur = self.current.as_ref().expect("operation in flight");
        let key = self.script[cur.seq].op.key();
        let target = if self.config.naive {
            key
        } else {
            self.ks.replica_key(key, index, self.r)
        };
        let width = cur.resolved.len();
        let offset = index + width * (retry as usize + cur.attempt as usize - 1);
        let entry = self.entry(cur.base, offset);
        let cur = self.current.as_mut().expect("operation in flight");
        cur.entries[index] = entry.id;
        let tag = Tag {
            seq: cur.seq,
            attempt: cur.attempt,
            index,
        };
        self.lookups
            .start(ctx, entry, target, Purpose::Service, tag);
    }

    fn on_resolved(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, out: LookupOutcome<Tag>) {
        let Some(cur) = self.current.as_mut() else {
            return;
        };
        let tag = out.tag;
        if tag.seq != cur.seq || tag.attempt != cur.attempt {
            return;
        }
        cur.hops += out.path.len();
        let Ok(owner) = out.result else {
            ctx.note(
                "resolve-failed",
                format!("idx={} target={}", tag.index, out.target),
            );
            return;
        };
        cur.resolved[tag.index] = Some(owner);
        let req = cur.req;
        let index = tag.index;
        let msg = match &self.script[cur.seq].op {
            Op::Put { key, value } => match cur.id {
                Some(id) => Msg::Put {
                    req,
                    index,
                    proposal: Proposal {
                        uid: *key,
                        id,
                        value: value.as_bytes().to_vec(),
                    },
                },
                None => Msg::NaivePut {
                    req,
                    uid: *key,
                    value: value.as_bytes().to_vec(),
                },
            },
            Op::Get { key } if self.config.naive => Msg::NaiveGet { req, uid: *key },
            Op::Get { key } => Msg::Get {
                req,
                index,
                uid: *key,
            },
        };
        ctx.send(owner.id, msg);
    }

    fn finish(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, result: OpResult) {
        let Some(cur) = self.current.take() else {
            return;
        };
        ctx.cancel_timer(&Timer::ClientAttempt {
            op: cur.seq as u64,
            attempt: cur.attempt,
        });
        let op = self.script[cur.seq].op.clone();
        let position = ctx.note(
            "op-done",
            format!(
                "client={} seq={} key={} attempts={} {:?}",
                self.id,
                cur.seq,
                op.key(),
                cur.attempt,
                result
            ),
        );
        self.outcomes.push(OpOutcome {
            client: self.id,
            seq: cur.seq,
            op,
            id: cur.id,
            start: cur.start,
            end: ctx.now(),
            attempts: cur.attempt,
            result,
            hops: cur.hops,
            entries: cur.entries,
            position,
        });
        self.start_next(ctx);
    }

    /// Accepts one reply per replica index, and only from the node that
    /// index was resolved to.
    fn accept(&mut self, from: ActorId, req: ReqId, index: usize) -> bool {
        let Some(cur) = self.current.as_mut() else {
            return false;
        };
        if req != cur.req || index >= cur.resolved.len() {
            return false;
        }
        if cur.resolved[index].is_none_or(|a| a.id != from) {
            return false;
        }
        cur.answered.insert(index)
    }

    fn on_get_reply(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        fp: Fingerprint,
        value: Vec<u8>,
        index: usize,
    ) {
        let need = if self.config.naive { 1 } else { self.f + 1 };
        let cur = self.current.as_mut().expect("operation in flight");
        let voters = cur.replies.entry(fp).or_default();
        voters.insert(index);
        cur.values.entry(fp).or_insert(value);
        if voters.len() >= need {
            let result = match fp {
                Some((_, version)) => OpResult::Found {
                    value: String::from_utf8_lossy(&cur.values[&fp]).into_owned(),
                    version,
                },
                None => OpResult::NotFound,
            };
            self.finish(ctx, result);
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, from: ActorId, msg: Msg) {
        match msg {
            Msg::FoundHop { query, hop, .. } => {
                if let Some(out) = self.lookups.on_hop(ctx, query, from, hop) {
                    self.on_resolved(ctx, out);
                }
            }
            Msg::PutAck {
                req,
                index,
                id,
                version,
                ..
            } => {
                if !self.accept(from, req, index) {
                    return;
                }
                let bar = self.ack_bar();
                let cur = self.current.as_mut().expect("operation in flight");
                if Some(id) != cur.id {
                    return;
                }
                let voters = cur.acks.entry((id, version)).or_default();
                voters.insert(index);
                if voters.len() >= bar {
                    self.finish(ctx, OpResult::Stored { version });
                }
            }
            Msg::NaiveAck { req, version, .. } => {
                if self.accept(from, req, 0) {
                    self.finish(ctx, OpResult::Stored { version });
                }
            }
            Msg::PutFailed { req, index, id, .. } => {
                if !self.accept(from, req, index) {
                    return;
                }
                let need = self.f + 1;
                let cur = self.current.as_mut().expect("operation in flight");
                if Some(id) == cur.id {
                    cur.failed.insert(index);
                    if cur.failed.len() >= need {
                        self.finish(ctx, OpResult::Failed);
                    }
                }
            }
            Msg::GetAck {
                req,
                index,
                value,
                version,
                ..
            } => {
                if self.accept(from, req, index) {
                    let fp = Some((value_digest(&value), version));
                    self.on_get_reply(ctx, fp, value, index);
                }
            }
            Msg::NotFound { req, index, .. } => {
                if self.accept(from, req, index) {
                    self.on_get_reply(ctx, None, Vec::new(), index);
                }
            }
            Msg::WrongReplica { req, index, .. } => {
                let Some(cur) = self.current.as_mut() else {
                    return;
                };
                if req != cur.req
                    || index >= cur.resolved.len()
                    || cur.resolved[index].is_none_or(|a| a.id != from)
                {
                    return;
                }
                cur.resolved[index] = None;
                cur.reresolved[index] += 1;
                let n = cur.reresolved[index];
                ctx.note("wrong-replica", format!("idx={index} claimed={from}"));
                if n <= MAX_RERESOLVE {
                    self.resolve(ctx, index, n);
                }
            }
            _ => {}
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, timer: Timer) {
        match timer {
            Timer::ClientStart(n) => {
                self.queue.push_back(n);
                self.start_next(ctx);
            }
            Timer::ClientAttempt { op, attempt } => {
                let Some(cur) = self.current.as_ref() else {
                    return;
                };
                if cur.seq as u64 != op || cur.attempt != attempt {
                    return;
                }
                if attempt < self.config.max_attempts {
                    self.begin_attempt(ctx);
                } else {
                    self.finish(ctx, OpResult::Timeout);
                }
            }
            Timer::LookupHop(q) => {
                if let Some(out) = self.lookups.on_timeout(ctx, q) {
                    self.on_resolved(ctx, out);
                }
            }
            _ => {}
        }
    }
}
