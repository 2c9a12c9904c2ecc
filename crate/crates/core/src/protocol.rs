//! Wire messages and timers shared by every actor in a run.
//!
//! Ring-layer messages implement Chord maintenance and iterative lookup.
//! Service-layer messages carry client operations, per-uid consensus,
//! recovery and the naive baseline. Byzantine behaviour is expressed as a
//! rewrite of outgoing messages in [`Payload::corrupt`].

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dht::consensus::{Proposal, ProposalId};
use crate::keyspace::{Key, KeyRange, KeySpace};
use crate::simnet::{ByzantineKind, Layer, NodeAddress, Payload};

/// Correlates a client request with its replies.
pub type ReqId = u64;

/// Why a lookup is being performed. Ring maintenance lookups are kept apart
/// from service lookups so a misrouting node keeps the ring itself intact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purpose {
    Maintenance,
    Service,
}

/// One step of an iterative lookup, as answered by the node queried.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Hop {
    /// The target lies between the replier and its successor.
    Owner {
        owner: NodeAddress,
        /// Later successors, in ring order.
        backups: Vec<NodeAddress>,
    },
    /// Ask `next`, the closest preceding node known to the replier.
    Next {
        next: NodeAddress,
        /// Other preceding candidates, closest first.
        fallbacks: Vec<NodeAddress>,
    },
}

/// A replica's copy of one uid as sent during recovery or transfer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntryCopy {
    pub uid: Key,
    pub index: usize,
    pub value: Vec<u8>,
    pub version: u64,
    pub id: Option<ProposalId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Msg {
    FindSuccessor {
        query: u64,
        target: Key,
        purpose: Purpose,
    },
    FoundHop {
        query: u64,
        purpose: Purpose,
        hop: Hop,
    },
    GetNeighbors {
        nonce: u64,
    },
    Neighbors {
        nonce: u64,
        pred: Option<NodeAddress>,
        succs: Vec<NodeAddress>,
    },
    Notify {
        candidate: NodeAddress,
    },
    Ping {
        nonce: u64,
    },
    Pong {
        nonce: u64,
    },

    Put {
        req: ReqId,
        index: usize,
        proposal: Proposal,
    },
    PutAck {
        req: ReqId,
        index: usize,
        uid: Key,
        id: ProposalId,
        version: u64,
    },
    PutFailed {
        req: ReqId,
        index: usize,
        uid: Key,
        id: ProposalId,
    },
    Get {
        req: ReqId,
        index: usize,
        uid: Key,
    },
    GetAck {
        req: ReqId,
        index: usize,
        uid: Key,
        value: Vec<u8>,
        version: u64,
    },
    NotFound {
        req: ReqId,
        index: usize,
        uid: Key,
    },
    WrongReplica {
        req: ReqId,
        index: usize,
        uid: Key,
    },

    Vote {
        uid: Key,
        from: usize,
        to: usize,
        slot: u64,
        round: u32,
        proposal: Proposal,
    },
    Commit {
        uid: Key,
        from: usize,
        to: usize,
        slot: u64,
        proposal: Proposal,
    },
    /// Sent by a replica that saw peers working on a later version: asks
    /// for the commits of every version from `slot` on.
    Behind {
        uid: Key,
        from: usize,
        to: usize,
        slot: u64,
    },
    /// A peer message reached a node that does not hold replica `index` of `uid`.
    Misdelivered {
        uid: Key,
        index: usize,
    },

    NaivePut {
        req: ReqId,
        uid: Key,
        value: Vec<u8>,
    },
    NaiveReplicate {
        uid: Key,
        value: Vec<u8>,
        version: u64,
    },
    NaiveAck {
        req: ReqId,
        uid: Key,
        version: u64,
    },
    NaiveGet {
        req: ReqId,
        uid: Key,
    },

    KeyListRequest {
        task: u64,
        range: KeyRange,
    },
    KeyListReply {
        task: u64,
        range: KeyRange,
        space: KeySpace,
        /// `(uid, replica index)` of every entry whose calculated key is in `range`.
        entries: Vec<(Key, usize)>,
        /// The replier's successor list, for walking ranges that span nodes.
        succs: Vec<NodeAddress>,
    },
    FetchRequest {
        task: u64,
        range: KeyRange,
        uids: Vec<Key>,
    },
    FetchReply {
        task: u64,
        range: KeyRange,
        entries: Vec<EntryCopy>,
    },
    Transfer {
        batch: u64,
        entries: Vec<EntryCopy>,
    },
    TransferAck {
        batch: u64,
    },
}

fn flip(value: &[u8]) -> Vec<u8> {
    if value.is_empty() {
        return vec![0xff];
    }
    value.iter().map(|b| !b).collect()
}

fn corrupt_proposal(p: &Proposal) -> Proposal {
    Proposal {
        uid: p.uid,
        id: p.id,
        value: flip(&p.value),
    }
}

fn bytes(v: &[u8]) -> String {
    if v.len() <= 16 {
        hex::encode(v)
    } else {
        format!("{}..({}B)", hex::encode(&v[..8]), v.len())
    }
}

fn addrs(list: &[NodeAddress]) -> String {
    let mut s = String::from("[");
    for (i, a) in list.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{}", a.key);
    }
    s.push(']');
    s
}

impl Payload for Msg {
    fn kind(&self) -> &'static str {
        match self {
            Msg::FindSuccessor { .. } => "find-successor",
            Msg::FoundHop { .. } => "found-hop",
            Msg::GetNeighbors { .. } => "get-neighbors",
            Msg::Neighbors { .. } => "neighbors",
            Msg::Notify { .. } => "notify",
            Msg::Ping { .. } => "ping",
            Msg::Pong { .. } => "pong",
            Msg::Put { .. } => "put",
            Msg::PutAck { .. } => "put-ack",
            Msg::PutFailed { .. } => "put-failed",
            Msg::Get { .. } => "get",
            Msg::GetAck { .. } => "get-ack",
            Msg::NotFound { .. } => "not-found",
            Msg::WrongReplica { .. } => "wrong-replica",
            Msg::Vote { .. } => "vote",
            Msg::Commit { .. } => "commit",
            Msg::Behind { .. } => "behind",
            Msg::Misdelivered { .. } => "misdelivered",
            Msg::NaivePut { .. } => "naive-put",
            Msg::NaiveReplicate { .. } => "naive-replicate",
            Msg::NaiveAck { .. } => "naive-ack",
            Msg::NaiveGet { .. } => "naive-get",
            Msg::KeyListRequest { .. } => "key-list-request",
            Msg::KeyListReply { .. } => "key-list-reply",
            Msg::FetchRequest { .. } => "fetch-request",
            Msg::FetchReply { .. } => "fetch-reply",
            Msg::Transfer { .. } => "transfer",
            Msg::TransferAck { .. } => "transfer-ack",
        }
    }

    fn layer(&self) -> Layer {
        match self {
            Msg::FindSuccessor { .. }
            | Msg::FoundHop { .. }
            | Msg::GetNeighbors { .. }
            | Msg::Neighbors { .. }
            | Msg::Notify { .. }
            | Msg::Ping { .. }
            | Msg::Pong { .. } => Layer::Ring,
            _ => Layer::Service,
        }
    }

    fn summary(&self) -> String {
        match self {
            Msg::FindSuccessor {
                query,
                target,
                purpose,
            } => format!("q={query} target={target} {purpose:?}"),
            Msg::FoundHop { query, hop, .. } => match hop {
                Hop::Owner { owner, backups } => {
                    format!("q={query} owner={} backups={}", owner.key, addrs(backups))
                }
                Hop::Next { next, fallbacks } => {
                    format!("q={query} next={} fallbacks={}", next.key, addrs(fallbacks))
                }
            },
            Msg::GetNeighbors { nonce } | Msg::Ping { nonce } | Msg::Pong { nonce } => {
                format!("n={nonce}")
            }
            Msg::Neighbors { nonce, pred, succs } => {
                format!(
                    "n={nonce} pred={:?} succs={}",
                    pred.map(|p| p.key.0),
                    addrs(succs)
                )
            }
            Msg::Notify { candidate } => format!("candidate={}", candidate.key),
            Msg::Put {
                req,
                index,
                proposal,
            } => format!("req={req} idx={index} {proposal}"),
            Msg::PutAck {
                req,
                index,
                uid,
                id,
                version,
            } => format!("req={req} idx={index} uid={uid} id={id} v={version}"),
            Msg::PutFailed {
                req,
                index,
                uid,
                id,
            } => format!("req={req} idx={index} uid={uid} id={id}"),
            Msg::Get { req, index, uid }
            | Msg::NotFound { req, index, uid }
            | Msg::WrongReplica { req, index, uid } => format!("req={req} idx={index} uid={uid}"),
            Msg::GetAck {
                req,
                index,
                uid,
                value,
                version,
            } => format!(
                "req={req} idx={index} uid={uid} value={} v={version}",
                bytes(value)
            ),
            Msg::Vote {
                uid,
                from,
                to,
                slot,
                round,
                proposal,
            } => format!(
                "uid={uid} {from}->{to} slot={slot} round={round} id={} value={}",
                proposal.id,
                bytes(&proposal.value)
            ),
            Msg::Commit {
                uid,
                from,
                to,
                slot,
                proposal,
            } => format!(
                "uid={uid} {from}->{to} slot={slot} id={} value={}",
                proposal.id,
                bytes(&proposal.value)
            ),
            Msg::Behind {
                uid,
                from,
                to,
                slot,
            } => format!("uid={uid} {from}->{to} slot={slot}"),
            Msg::Misdelivered { uid, index } => format!("uid={uid} idx={index}"),
            Msg::NaivePut { req, uid, value } => {
                format!("req={req} uid={uid} value={}", bytes(value))
            }
            Msg::NaiveReplicate {
                uid,
                value,
                version,
            } => format!("uid={uid} value={} v={version}", bytes(value)),
            Msg::NaiveAck { req, uid, version } => format!("req={req} uid={uid} v={version}"),
            Msg::NaiveGet { req, uid } => format!("req={req} uid={uid}"),
            Msg::KeyListRequest { task, range } => {
                format!("task={task} range=({},{}]", range.lower, range.upper)
            }
            Msg::KeyListReply {
                task,
                range,
                entries,
                ..
            } => {
                let mut s = format!("task={task} range=({},{}] uids=[", range.lower, range.upper);
                for (i, (uid, idx)) in entries.iter().enumerate() {
                    if i > 0 {
                        s.push(',');
                    }
                    let _ = write!(s, "{uid}/{idx}");
                }
                s.push(']');
                s
            }
            Msg::FetchRequest { task, uids, .. } => format!("task={task} uids={}", uids.len()),
            Msg::FetchReply { task, entries, .. }
            | Msg::Transfer {
                batch: task,
                entries,
            } => {
                let mut s = format!("#{task} [");
                for (i, e) in entries.iter().enumerate() {
                    if i > 0 {
                        s.push(',');
                    }
                    let _ = write!(
                        s,
                        "{}/{}=v{}:{}",
                        e.uid,
                        e.index,
                        e.version,
                        bytes(&e.value)
                    );
                }
                s.push(']');
                s
            }
            Msg::TransferAck { batch } => format!("#{batch}"),
        }
    }

    fn corrupt(
        &self,
        fault: ByzantineKind,
        me: &NodeAddress,
        rng: &mut ChaCha8Rng,
    ) -> Option<Self> {
        match fault {
            ByzantineKind::Silent => (self.layer() == Layer::Ring).then(|| self.clone()),
            ByzantineKind::Misroute => Some(match self {
                Msg::FoundHop {
                    query,
                    purpose: Purpose::Service,
                    ..
                } => Msg::FoundHop {
                    query: *query,
                    purpose: Purpose::Service,
                    hop: Hop::Owner {
                        owner: *me,
                        backups: Vec::new(),
                    },
                },
                other => other.clone(),
            }),
            ByzantineKind::WrongValue => Some(match self.clone() {
                Msg::GetAck {
                    req,
                    index,
                    uid,
                    value,
                    version,
                } => Msg::GetAck {
                    req,
                    index,
                    uid,
                    value: flip(&value),
                    version,
                },
                Msg::PutAck {
                    req,
                    index,
                    uid,
                    id,
                    version,
                } => Msg::PutAck {
                    req,
                    index,
                    uid,
                    id,
                    version: version + 1,
                },
                Msg::Vote {
                    uid,
                    from,
                    to,
                    slot,
                    round,
                    proposal,
                } => Msg::Vote {
                    uid,
                    from,
                    to,
                    slot,
                    round,
                    proposal: corrupt_proposal(&proposal),
                },
                Msg::Commit {
                    uid,
                    from,
                    to,
                    slot,
                    proposal,
                } => Msg::Commit {
                    uid,
                    from,
                    to,
                    slot,
                    proposal: corrupt_proposal(&proposal),
                },
                Msg::FetchReply {
                    task,
                    range,
                    entries,
                } => Msg::FetchReply {
                    task,
                    range,
                    entries: entries
                        .into_iter()
                        .map(|e| EntryCopy {
                            value: flip(&e.value),
                            ..e
                        })
                        .collect(),
                },
                Msg::Transfer { batch, entries } => Msg::Transfer {
                    batch,
                    entries: entries
                        .into_iter()
                        .map(|e| EntryCopy {
                            value: flip(&e.value),
                            ..e
                        })
                        .collect(),
                },
                Msg::NaiveAck { req, uid, version } => Msg::NaiveAck {
                    req,
                    uid,
                    version: version + 1,
                },
                Msg::KeyListReply {
                    task,
                    range,
                    space,
                    mut entries,
                    succs,
                } => {
                    entries.extend(phantoms(&space, &range, rng));
                    Msg::KeyListReply {
                        task,
                        range,
                        space,
                        entries,
                        succs,
                    }
                }
                other => other,
            }),
        }
    }
}

/// Number of fabricated uids a wrong-value node adds to each key list.
pub const PHANTOMS_PER_REPLY: usize = 10;

/// Plausible fabricated entries: random calculated keys inside `range`,
/// claimed under replica index 0 so the uid equals the calculated key.
fn phantoms(space: &KeySpace, range: &KeyRange, rng: &mut ChaCha8Rng) -> Vec<(Key, usize)> {
    let width = space.width(range);
    (0..PHANTOMS_PER_REPLY)
        .map(|_| {
            let step = rng.gen_range(1..=width.max(1));
            (space.add(range.lower, step), 0)
        })
        .collect()
}

/// Everything an actor can wait on.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Timer {
    /// Periodic stabilize, predecessor check and finger refresh.
    Stabilize,
    /// Failure-detection deadline for an outstanding ring request.
    RingRequest(u64),
    /// Deadline for the current hop of a lookup.
    LookupHop(u64),
    Consensus {
        uid: Key,
        index: usize,
        slot: u64,
        round: u32,
    },
    Backoff {
        uid: Key,
        index: usize,
        slot: u64,
        round: u32,
    },
    RecoveryRetry(u64),
    ReleaseDeadline(u64),
    /// A client operation attempt has run out of time.
    ClientAttempt {
        op: u64,
        attempt: u32,
    },
    /// Starts the `n`th scripted operation of a client.
    ClientStart(usize),
    /// A node scheduled to join the ring starts doing so.
    Join,
}
