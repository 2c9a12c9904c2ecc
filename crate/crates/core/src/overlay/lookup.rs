use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::keyspace::{Key, KeySpace};
use crate::protocol::{Hop, Msg, Purpose, Timer};
use crate::simnet::{ActorId, Ctx, NodeAddress, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LookupError {
    /// Every candidate for the next hop stopped answering.
    Unreachable,
    /// The hop budget ran out, which only happens on corrupted routing state.
    TooManyHops,
}

#[derive(Debug, Clone)]
pub struct LookupOutcome<T> {
    pub tag: T,
    pub target: Key,
    pub result: Result<NodeAddress, LookupError>,
    /// Nodes queried, in order.
    pub path: Vec<NodeAddress>,
    /// Nodes that failed to answer twice.
    pub suspects: Vec<NodeAddress>,
    pub started: Tick,
}

impl<T> LookupOutcome<T> {
    pub fn hops(&self) -> usize {
        self.path.len()
    }
}

#[derive(Debug, Clone)]
struct Active<T> {
    tag: T,
    target: Key,
    purpose: Purpose,
    current: NodeAddress,
    tries: u8,
    candidates: Vec<NodeAddress>,
    path: Vec<NodeAddress>,
    suspects: Vec<NodeAddress>,
    started: Tick,
}

/// Drives iterative lookups hop by hop on behalf of one actor.
#[derive(Debug, Clone)]
pub struct Lookups<T> {
    ks: KeySpace,
    hop_timeout: Tick,
    max_hops: usize,
    next: u64,
    active: BTreeMap<u64, Active<T>>,
}

impl<T: Clone> Lookups<T> {
    pub fn new(ks: KeySpace, hop_timeout: Tick) -> Self {
        Self {
            ks,
            hop_timeout,
            max_hops: 2 * ks.bits() as usize + 8,
            next: 0,
            active: BTreeMap::new(),
        }
    }

    pub fn in_flight(&self) -> usize {
        self.active.len()
    }

    /// Starts a lookup whose first hop is `entry`.
    pub fn start(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        entry: NodeAddress,
        target: Key,
        purpose: Purpose,
        tag: T,
    ) -> u64 {
        self.next += 1;
        let query = self.next;
        let a = Active {
            tag,
            target,
            purpose,
            current: entry,
            tries: 0,
            candidates: Vec::new(),
            path: Vec::new(),
            suspects: Vec::new(),
            started: ctx.now(),
        };
        self.active.insert(query, a);
        self.ask(ctx, query);
        query
    }

    /// Starts a lookup from a locally computed first answer, as a ring node
    /// does when it routes on its own behalf.
    pub fn start_local(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        me: NodeAddress,
        first: Hop,
        target: Key,
        purpose: Purpose,
        tag: T,
    ) -> Option<LookupOutcome<T>> {
        self.next += 1;
        let query = self.next;
        let a = Active {
            tag,
            target,
            purpose,
            current: me,
            tries: 1,
            candidates: Vec::new(),
            path: Vec::new(),
            suspects: Vec::new(),
            started: ctx.now(),
        };
        self.active.insert(query, a);
        self.on_hop(ctx, query, me.id, first)
    }

    fn ask(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, query: u64) {
        let a = self.active.get_mut(&query).expect("active lookup");
        a.tries += 1;
        if a.tries == 1 {
            a.path.push(a.current);
        }
        ctx.send(
            a.current.id,
            Msg::FindSuccessor {
                query,
                target: a.target,
                purpose: a.purpose,
            },
        );
        ctx.set_timer(self.hop_timeout, Timer::LookupHop(query));
    }

    fn finish(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        query: u64,
        result: Result<NodeAddress, LookupError>,
    ) -> Option<LookupOutcome<T>> {
        ctx.cancel_timer(&Timer::LookupHop(query));
        let a = self.active.remove(&query)?;
        Some(LookupOutcome {
            tag: a.tag,
            target: a.target,
            result,
            path: a.path,
            suspects: a.suspects,
            started: a.started,
        })
    }

    /// Moves to the best remaining candidate, or fails the lookup.
    fn advance(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, query: u64) -> Option<LookupOutcome<T>> {
        let ks = self.ks;
        let a = self.active.get_mut(&query)?;
        if a.path.len() >= self.max_hops {
            return self.finish(ctx, query, Err(LookupError::TooManyHops));
        }
        let dead: BTreeSet<ActorId> = a.suspects.iter().map(|s| s.id).collect();
        a.candidates.retain(|c| !dead.contains(&c.id));
        a.candidates.sort_by_key(|c| ks.distance(c.key, a.target));
        a.candidates.dedup();
        if a.candidates.is_empty() {
            return self.finish(ctx, query, Err(LookupError::Unreachable));
        }
        a.current = a.candidates.remove(0);
        a.tries = 0;
        self.ask(ctx, query);
        None
    }

    pub fn on_hop(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        query: u64,
        from: ActorId,
        hop: Hop,
    ) -> Option<LookupOutcome<T>> {
        let ks = self.ks;
        let a = self.active.get_mut(&query)?;
        if a.current.id != from {
            return None;
        }
        match hop {
            Hop::Owner { owner, .. } => self.finish(ctx, query, Ok(owner)),
            Hop::Next { next, fallbacks } => {
                // A hop must get strictly closer to the target; anything else
                // is a routing loop and the candidate is discarded.
                let target = a.target;
                let gap = |k: Key| match ks.distance(k, target) {
                    0 => ks.size(),
                    d => d,
                };
                let here = gap(a.current.key);
                let closer = |n: &NodeAddress| gap(n.key) < here;
                let fresh: Vec<NodeAddress> = std::iter::once(next)
                    .chain(fallbacks)
                    .filter(|n| closer(n) && !a.path.iter().any(|p| p.id == n.id))
                    .collect();
                a.candidates.retain(|c| gap(c.key) < here);
                a.candidates.extend(fresh);
                self.advance(ctx, query)
            }
        }
    }

    pub fn on_timeout(
        &mut self,
        ctx: &mut Ctx<'_, Msg, Timer>,
        query: u64,
    ) -> Option<LookupOutcome<T>> {
        let a = self.active.get_mut(&query)?;
        if a.tries < 2 {
            self.ask(ctx, query);
            return None;
        }
        let dead = a.current;
        a.suspects.push(dead);
        self.advance(ctx, query)
    }
}
