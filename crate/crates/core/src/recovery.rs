//! Service-state repair driven by overlay upcalls.
//!
//! On `TakeOver(range)` a node rebuilds the entries of the range from the
//! rest of each entry's peer set:
//!
//! 1. **Discover.** For every shift between replica positions, look up the
//!    lowest key of the shifted range and walk successor lists until the
//!    range is covered.
//! 2. **List.** Every server found returns the `(uid, index)` pairs it holds
//!    in the shifted range. A uid is admitted once `f+1` distinct servers
//!    report it, so fabricated keys from up to `f` faulty servers never are.
//! 3. **Fetch.** Each admitted entry is requested from `f+1` reporters, more
//!    if replies disagree. A `(value digest, version)` pair reported by `f+1`
//!    servers is written; the highest such version wins.
//!
//! A task that is not complete retries on a timer. On `Release(range)` the
//! node pushes its entries in the range to the new owner and deletes them
//! after an acknowledgement or a deadline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dht::service::Replica;
use crate::dht::store::{value_digest, StoreEntry};
use crate::keyspace::{Key, KeyRange, KeySpace};
use crate::overlay::{KeyspaceChange, LookupOutcome, Overlay};
use crate::protocol::{EntryCopy, Msg, Timer};
use crate::simnet::{ActorId, Ctx, NodeAddress, Tick};

/// Lookup tokens issued by recovery carry this tag in their low bits.
pub const TOKEN_TAG: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    /// Interval between attempts of an unfinished task.
    pub retry_every: Tick,
    /// Released entries are deleted at the latest this long after release.
    pub release_deadline: Tick,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            retry_every: 50,
            release_deadline: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Discovering,
    Done,
    Partial,
}

/// Progress through one shifted range.
#[derive(Debug, Clone)]
struct Walk {
    range: KeyRange,
    /// Node asked last and not yet answered.
    waiting: Option<NodeAddress>,
    /// Successors to try if `waiting` never answers.
    alternatives: Vec<NodeAddress>,
    visited: BTreeSet<ActorId>,
    complete: bool,
}

type Fingerprint = ([u8; 16], u64);

#[derive(Debug, Clone, Default)]
struct Fetch {
    asked: BTreeSet<ActorId>,
    replies: BTreeMap<ActorId, Fingerprint>,
    copies: BTreeMap<Fingerprint, EntryCopy>,
    recovered: Option<u64>,
}

#[derive(Debug, Clone)]
struct Task {
    range: KeyRange,
    started: Tick,
    attempt: u32,
    walks: Vec<Walk>,
    /// Reporters per entry this node should hold.
    tally: BTreeMap<(Key, usize), BTreeSet<ActorId>>,
    /// Shifted range each reporter was asked about.
    sources: BTreeMap<ActorId, (NodeAddress, KeyRange)>,
    fetches: BTreeMap<(Key, usize), Fetch>,
    admitted_before: usize,
    status: Status,
}

/// Summary of a recovery task, for reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskReport {
    pub id: u64,
    pub range: KeyRange,
    pub status: Status,
    pub started: Tick,
    pub finished: Option<Tick>,
    pub attempts: u32,
    pub admitted: usize,
    pub recovered: usize,
    /// Reported uids that never reached the admission threshold.
    pub rejected: usize,
}

#[derive(Debug, Clone)]
struct Handoff {
    to: NodeAddress,
    entries: Vec<(Key, usize)>,
}

#[derive(Debug, Clone)]
pub struct Recovery {
    ks: KeySpace,
    r: usize,
    need: usize,
    config: RecoveryConfig,
    tasks: BTreeMap<u64, Task>,
    reports: BTreeMap<u64, TaskReport>,
    lookups: BTreeMap<u64, (u64, usize)>,
    handoffs: BTreeMap<u64, Handoff>,
    in_flight: BTreeMap<ActorId, usize>,
    next_id: u64,
    next_token: u64,
}

impl Recovery {
    pub fn new(ks: KeySpace, f: usize, config: RecoveryConfig) -> Self {
        Self {
            ks,
            r: 3 * f + 1,
            need: f + 1,
            config,
            tasks: BTreeMap::new(),
            reports: BTreeMap::new(),
            lookups: BTreeMap::new(),
            handoffs: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            next_id: 0,
            next_token: 0,
        }
    }

    pub fn reports(&self) -> impl Iterator<Item = &TaskReport> {
        self.reports.values()
    }

    /// True when no task is unfinished and no handoff is pending.
    pub fn is_idle(&self) -> bool {
        self.tasks.is_empty() && self.handoffs.is_empty()
    }

    pub fn on_change(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        ov: &mut Overlay,
        rep: &mut Replica,
        change: KeyspaceChange,
    ) {
        match change {
            KeyspaceChange::TakeOver(range) => self.take_over(ctx, ov, range),
            KeyspaceChange::Release(range) => self.release(ctx, ov, rep, range),
        }
    }

    fn take_over(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, ov: &mut Overlay, range: KeyRange) {
        self.next_id += 1;
        let id = self.next_id;
        let walks = self
            .ks
            .peer_shifts(self.r)
            .into_iter()
            .map(|s| Walk {
                range: self.ks.shift_range(&range, s),
                waiting: None,
                alternatives: Vec::new(),
                visited: BTreeSet::new(),
                complete: false,
            })
            .collect();
        let task = Task {
            range,
            started: ctx.now(),
            attempt: 0,
            walks,
            tally: BTreeMap::new(),
            sources: BTreeMap::new(),
            fetches: BTreeMap::new(),
            admitted_before: 0,
            status: Status::Discovering,
        };
        ctx.note(
            "recovery-start",
            format!("task={id} range=({},{}]", range.lower, range.upper),
        );
        self.tasks.insert(id, task);
        self.report(id);
        self.attempt(ctx, ov, id);
    }

    fn token(&mut self) -> u64 {
        self.next_token += 1;
        (self.next_token << 2) | TOKEN_TAG
    }

    /// Starts a new pass over every shifted range of task `id`.
    fn attempt(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, ov: &mut Overlay, id: u64) {
        let Some(task) = self.tasks.get_mut(&id) else {
            return;
        };
        task.attempt += 1;
        let mut starts = Vec::new();
        for (w, walk) in task.walks.iter_mut().enumerate() {
            match walk.waiting {
                // Stuck on a silent node: skip to the next successor it named.
                Some(_) if !walk.alternatives.is_empty() => {
                    let next = walk.alternatives.remove(0);
                    walk.waiting = Some(next);
                    ctx.send(
                        next.id,
                        Msg::KeyListRequest {
                            task: id,
                            range: walk.range,
                        },
                    );
                }
                _ => {
                    walk.waiting = None;
                    walk.alternatives.clear();
                    walk.visited.clear();
                    walk.complete = false;
                    starts.push((w, self.ks.add(walk.range.lower, 1)));
                }
            }
        }
        let detour = task.attempt > 1;
        for (w, target) in starts {
            let token = self.token();
            self.lookups.insert(token, (id, w));
            ov.lookup(ctx, target, token, detour);
        }
        ctx.set_timer(self.config.retry_every, Timer::RecoveryRetry(id));
    }

    pub fn on_lookup(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, out: LookupOutcome<u64>) {
        let Some((id, w)) = self.lookups.remove(&out.tag) else {
            return;
        };
        let Some(task) = self.tasks.get_mut(&id) else {
            return;
        };
        let walk = &mut task.walks[w];
        if let Ok(owner) = out.result {
            walk.waiting = Some(owner);
            ctx.send(
                owner.id,
                Msg::KeyListRequest {
                    task: id,
                    range: walk.range,
                },
            );
        }
    }

    fn release(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        ov: &mut Overlay,
        rep: &mut Replica,
        range: KeyRange,
    ) {
        let entries = rep.release(&range);
        let Some(to) = ov.state().pred else { return };
        ctx.note(
            "release",
            format!(
                "range=({},{}] entries={} to={}",
                range.lower,
                range.upper,
                entries.len(),
                to.key
            ),
        );
        if entries.is_empty() {
            return;
        }
        self.next_id += 1;
        let batch = self.next_id;
        ctx.send(
            to.id,
            Msg::Transfer {
                batch,
                entries: entries.iter().map(StoreEntry::copy).collect(),
            },
        );
        self.handoffs.insert(
            batch,
            Handoff {
                to,
                entries: entries.iter().map(|e| (e.uid, e.index)).collect(),
            },
        );
        ctx.set_timer(self.config.release_deadline, Timer::ReleaseDeadline(batch));
    }

    fn finish_handoff(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        ov: &Overlay,
        rep: &mut Replica,
        batch: u64,
        acked: bool,
    ) {
        if let Some(h) = self.handoffs.remove(&batch) {
            ctx.cancel_timer(&Timer::ReleaseDeadline(batch));
            let n = rep.drop_entries(ov, &h.entries);
            ctx.note(
                "handoff-done",
                format!("batch={batch} to={} acked={acked} deleted={n}", h.to.key),
            );
        }
    }

    /// Which of this node's entries a peer's `(uid, index)` corresponds to.
    fn local_slots(&self, range: &KeyRange, uid: Key) -> Vec<usize> {
        (0..self.r)
            .filter(|&i| self.ks.contains(range, self.ks.replica_key(uid, i, self.r)))
            .collect()
    }

    fn report(&mut self, id: u64) {
        let Some(t) = self.tasks.get(&id) else { return };
        let admitted = t.tally.values().filter(|s| s.len() >= self.need).count();
        let finished = matches!(t.status, Status::Done).then_some(0);
        let r = TaskReport {
            id,
            range: t.range,
            status: t.status,
            started: t.started,
            finished,
            attempts: t.attempt,
            admitted,
            recovered: t.fetches.values().filter(|f| f.recovered.is_some()).count(),
            rejected: t.tally.len() - admitted,
        };
        self.reports.insert(id, r);
    }

    /// Sends fetches for admitted entries that still need sources.
    fn plan_fetches(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, id: u64) {
        let need = self.need;
        let Some(task) = self.tasks.get_mut(&id) else {
            return;
        };
        let mut requests: BTreeMap<ActorId, BTreeSet<Key>> = BTreeMap::new();
        for (slot, reporters) in &task.tally {
            if reporters.len() < need {
                continue;
            }
            let fetch = task.fetches.entry(*slot).or_default();
            if fetch.recovered.is_some() {
                continue;
            }
            let outstanding = fetch
                .asked
                .iter()
                .filter(|a| !fetch.replies.contains_key(a))
                .count();
            let best = fetch
                .copies
                .keys()
                .map(|fp| fetch.replies.values().filter(|r| *r == fp).count())
                .max()
                .unwrap_or(0);
            // Enough requests are in flight to reach f+1 matching replies.
            let wanted = need.saturating_sub(best);
            if outstanding >= wanted {
                continue;
            }
            let mut candidates: Vec<(usize, Key, ActorId)> = reporters
                .iter()
                .filter(|a| !fetch.asked.contains(a))
                .filter_map(|a| {
                    task.sources.get(a).map(|(addr, _)| {
                        (self.in_flight.get(a).copied().unwrap_or(0), addr.key, *a)
                    })
                })
                .collect();
            candidates.sort();
            for (_, _, a) in candidates.into_iter().take(wanted - outstanding) {
                fetch.asked.insert(a);
                requests.entry(a).or_default().insert(slot.0);
            }
        }
        for (a, uids) in requests {
            let Some((_, range)) = task.sources.get(&a) else {
                continue;
            };
            *self.in_flight.entry(a).or_default() += 1;
            ctx.send(
                a,
                Msg::FetchRequest {
                    task: id,
                    range: *range,
                    uids: uids.into_iter().collect(),
                },
            );
        }
    }

    fn check_done(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, id: u64) {
        let need = self.need;
        let Some(task) = self.tasks.get_mut(&id) else {
            return;
        };
        let covered = task.walks.iter().all(|w| w.complete);
        let admitted: Vec<&(Key, usize)> = task
            .tally
            .iter()
            .filter(|(_, s)| s.len() >= need)
            .map(|(k, _)| k)
            .collect();
        let fetched = admitted
            .iter()
            .all(|k| task.fetches.get(k).is_some_and(|f| f.recovered.is_some()));
        // A later attempt that admits nothing new confirms the listing is complete.
        let settled = if task.attempt > 1 {
            admitted.len() == task.admitted_before
        } else {
            admitted.is_empty()
        };
        if covered && fetched && settled {
            task.status = Status::Done;
            let n = admitted.len();
            ctx.cancel_timer(&Timer::RecoveryRetry(id));
            ctx.note(
                "recovery-done",
                format!(
                    "task={id} range=({},{}] recovered={n} rejected={} attempts={}",
                    task.range.lower,
                    task.range.upper,
                    task.tally.len() - n,
                    task.attempt
                ),
            );
            self.report(id);
            if let Some(r) = self.reports.get_mut(&id) {
                r.finished = Some(ctx.now());
            }
            self.tasks.remove(&id);
        }
    }

    /// Handles a recovery message. Returns false for anything else.
    pub fn on_message(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        ov: &mut Overlay,
        rep: &mut Replica,
        from: ActorId,
        msg: &Msg,
    ) -> bool {
        match msg {
            Msg::KeyListRequest { task, range } => {
                let entries = rep
                    .store()
                    .in_range(&self.ks, range)
                    .map(|e| (e.uid, e.index))
                    .collect();
                ctx.send(
                    from,
                    Msg::KeyListReply {
                        task: *task,
                        range: *range,
                        space: self.ks,
                        entries,
                        succs: ov.state().succs.clone(),
                    },
                );
            }
            Msg::KeyListReply {
                task: id,
                range,
                entries,
                succs,
                ..
            } => {
                let ks = self.ks;
                let r = self.r;
                let Some(task) = self.tasks.get(id) else {
                    return true;
                };
                let Some(w) = task.walks.iter().position(|w| w.range == *range) else {
                    return true;
                };
                if task.walks[w].waiting.is_none_or(|a| a.id != from) {
                    return true;
                }
                let own = task.range;
                let mut slots = Vec::new();
                for &(uid, j) in entries {
                    if j >= r || !ks.contains(range, ks.replica_key(uid, j, r)) {
                        continue;
                    }
                    slots.extend(self.local_slots(&own, uid).into_iter().map(|i| (uid, i)));
                }
                let task = self.tasks.get_mut(id).expect("task");
                let walk = &mut task.walks[w];
                let replier = walk.waiting.take().expect("waiting");
                walk.visited.insert(from);
                // Continue along the ring while the replier's key is short of the range end.
                let short = ks.between_open(range.lower, range.upper, replier.key);
                let next = succs
                    .iter()
                    .copied()
                    .find(|s| !walk.visited.contains(&s.id));
                match next {
                    Some(n) if short => {
                        walk.waiting = Some(n);
                        walk.alternatives = succs
                            .iter()
                            .copied()
                            .filter(|s| s.id != n.id && !walk.visited.contains(&s.id))
                            .collect();
                        ctx.send(
                            n.id,
                            Msg::KeyListRequest {
                                task: *id,
                                range: *range,
                            },
                        );
                    }
                    _ => walk.complete = true,
                }
                task.sources.insert(from, (replier, *range));
                for slot in slots {
                    task.tally.entry(slot).or_default().insert(from);
                }
                self.plan_fetches(ctx, *id);
                self.check_done(ctx, *id);
                self.report(*id);
            }
            Msg::FetchRequest { task, range, uids } => {
                let wanted: BTreeSet<Key> = uids.iter().copied().collect();
                let entries = rep
                    .store()
                    .in_range(&self.ks, range)
                    .filter(|e| wanted.contains(&e.uid))
                    .map(StoreEntry::copy)
                    .collect();
                ctx.send(
                    from,
                    Msg::FetchReply {
                        task: *task,
                        range: *range,
                        entries,
                    },
                );
            }
            Msg::FetchReply {
                task: id, entries, ..
            } => {
                if let Some(n) = self.in_flight.get_mut(&from) {
                    *n = n.saturating_sub(1);
                }
                let need = self.need;
                let ks = self.ks;
                let r = self.r;
                let Some(task) = self.tasks.get_mut(id) else {
                    return true;
                };
                let mut installs = Vec::new();
                for (slot, fetch) in task.fetches.iter_mut() {
                    if !fetch.asked.contains(&from) || fetch.replies.contains_key(&from) {
                        continue;
                    }
                    let Some(copy) = entries.iter().find(|e| e.uid == slot.0) else {
                        continue;
                    };
                    let fp = (value_digest(&copy.value), copy.version);
                    fetch.replies.insert(from, fp);
                    fetch.copies.entry(fp).or_insert_with(|| copy.clone());
                    let winner = fetch
                        .copies
                        .iter()
                        .filter(|(fp, _)| {
                            fetch.replies.values().filter(|r| r == fp).count() >= need
                        })
                        .max_by_key(|(fp, _)| fp.1)
                        .map(|(_, c)| c.clone());
                    if let Some(c) = winner {
                        if fetch.recovered.is_none_or(|v| v < c.version) {
                            fetch.recovered = Some(c.version);
                            installs.push(StoreEntry {
                                calculated: ks.replica_key(slot.0, slot.1, r),
                                uid: slot.0,
                                index: slot.1,
                                value: c.value,
                                version: c.version,
                                id: c.id,
                            });
                        }
                    }
                }
                for e in installs {
                    rep.install(ctx, ov, e, true);
                }
                self.plan_fetches(ctx, *id);
                self.check_done(ctx, *id);
                self.report(*id);
            }
            Msg::Transfer { batch, entries } => {
                let ks = self.ks;
                let r = self.r;
                for c in entries {
                    if c.index >= r {
                        continue;
                    }
                    let calculated = ks.replica_key(c.uid, c.index, r);
                    if !ov.owns(calculated) {
                        continue;
                    }
                    let e = StoreEntry {
                        calculated,
                        uid: c.uid,
                        index: c.index,
                        value: c.value.clone(),
                        version: c.version,
                        id: c.id,
                    };
                    rep.install(ctx, ov, e, false);
                }
                ctx.send(from, Msg::TransferAck { batch: *batch });
            }
            Msg::TransferAck { batch } => {
                if self.handoffs.get(batch).is_some_and(|h| h.to.id == from) {
                    self.finish_handoff(ctx, ov, rep, *batch, true);
                }
            }
            _ => return false,
        }
        true
    }

    /// Handles a recovery timer. Returns false for anything else.
    pub fn on_timer(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        ov: &mut Overlay,
        rep: &mut Replica,
        timer: &Timer,
    ) -> bool {
        match timer {
            Timer::RecoveryRetry(id) => {
                let need = self.need;
                if let Some(task) = self.tasks.get_mut(id) {
                    task.admitted_before = task.tally.values().filter(|s| s.len() >= need).count();
                    task.status = Status::Partial;
                    // Fetches that went unanswered may be re-sent to anyone.
                    for f in task.fetches.values_mut().filter(|f| f.recovered.is_none()) {
                        let answered: BTreeSet<ActorId> = f.replies.keys().copied().collect();
                        if f.asked.len() > answered.len() {
                            f.asked = answered;
                        }
                    }
                    self.report(*id);
                    self.attempt(ctx, ov, *id);
                    self.plan_fetches(ctx, *id);
                }
            }
            Timer::ReleaseDeadline(batch) => self.finish_handoff(ctx, ov, rep, *batch, false),
            _ => return false,
        }
        true
    }
}
