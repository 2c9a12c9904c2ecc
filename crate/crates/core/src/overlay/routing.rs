use std::collections::BTreeSet;

use crate::keyspace::{Key, KeyRange, KeySpace};
use crate::protocol::Hop;
use crate::simnet::{ActorId, NodeAddress};

/// How many preceding candidates a `Next` reply carries besides the best one.
const FALLBACKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingState {
    pub me: NodeAddress,
    pub pred: Option<NodeAddress>,
    /// Successor list, nearest first. Empty means the node is its own successor.
    pub succs: Vec<NodeAddress>,
    /// `fingers[i]` caches the owner of `me + 2^i`.
    pub fingers: Vec<Option<NodeAddress>>,
    /// Exclusive lower bound of the keys this node answers for; `None`
    /// until the node learns a predecessor after joining.
    pub lower: Option<Key>,
}

impl RoutingState {
    /// A node that has not joined any ring yet.
    pub fn detached(me: NodeAddress, bits: u32) -> Self {
        Self {
            me,
            pred: None,
            succs: Vec::new(),
            fingers: vec![None; bits as usize],
            lower: None,
        }
    }

    /// The first node of a new ring, owning the whole circle.
    pub fn alone(me: NodeAddress, bits: u32) -> Self {
        Self {
            lower: Some(me.key),
            ..Self::detached(me, bits)
        }
    }

    pub fn successor(&self) -> NodeAddress {
        self.succs.first().copied().unwrap_or(self.me)
    }

    /// Keys this node currently answers for, if any.
    pub fn responsibility(&self) -> Option<KeyRange> {
        self.lower.map(|l| KeyRange::new(l, self.me.key))
    }

    pub fn owns(&self, ks: &KeySpace, k: Key) -> bool {
        self.responsibility().is_some_and(|r| ks.contains(&r, k))
    }

    /// Every distinct node this node knows about, excluding itself.
    pub fn known(&self) -> BTreeSet<NodeAddress> {
        self.succs
            .iter()
            .copied()
            .chain(self.fingers.iter().flatten().copied())
            .chain(self.pred)
            .filter(|a| a.id != self.me.id)
            .collect()
    }

    /// Known nodes strictly between this node and `target`, closest to
    /// `target` first.
    pub fn preceding(
        &self,
        ks: &KeySpace,
        target: Key,
        exclude: &BTreeSet<ActorId>,
    ) -> Vec<NodeAddress> {
        let mut c: Vec<NodeAddress> = self
            .succs
            .iter()
            .chain(self.fingers.iter().flatten())
            .copied()
            .filter(|a| !exclude.contains(&a.id) && ks.between_open(self.me.key, target, a.key))
            .collect();
        c.sort_by_key(|a| ks.distance(a.key, target));
        c.dedup();
        c
    }

    /// Answer to a find-successor query for `target`.
    pub fn hop(&self, ks: &KeySpace, target: Key) -> Hop {
        let succ = self.successor();
        if succ.id == self.me.id || ks.contains(&KeyRange::new(self.me.key, succ.key), target) {
            return Hop::Owner {
                owner: succ,
                backups: self.succs.iter().skip(1).copied().collect(),
            };
        }
        let mut c = self.preceding(ks, target, &BTreeSet::new());
        if c.is_empty() {
            return Hop::Owner {
                owner: succ,
                backups: self.succs.iter().skip(1).copied().collect(),
            };
        }
        let next = c.remove(0);
        c.truncate(FALLBACKS);
        Hop::Next { next, fallbacks: c }
    }

    /// Drops every reference to a node believed dead. Returns true if the
    /// predecessor was among them.
    pub fn forget(&mut self, dead: ActorId) -> bool {
        self.succs.retain(|a| a.id != dead);
        for f in &mut self.fingers {
            if f.is_some_and(|a| a.id == dead) {
                *f = None;
            }
        }
        if self.pred.is_some_and(|p| p.id == dead) {
            self.pred = None;
            return true;
        }
        false
    }

    /// Installs `succ` followed by `its_succs` as the successor list.
    pub fn adopt_successors(&mut self, succ: NodeAddress, its_succs: &[NodeAddress], len: usize) {
        let mut list = vec![succ];
        for a in its_succs {
            if a.id == self.me.id || list.iter().any(|b| b.id == a.id) {
                break;
            }
            list.push(*a);
        }
        list.truncate(len.max(1));
        if succ.id == self.me.id {
            list.clear();
        }
        self.succs = list;
    }
}

/// Brute-force owner of `k` among `nodes`: the first node key at or after
/// `k`, wrapping around the circle.
pub fn oracle_owner(ks: &KeySpace, nodes: &[NodeAddress], k: Key) -> Option<NodeAddress> {
    nodes.iter().copied().min_by_key(|n| ks.distance(k, n.key))
}

/// Routing state each node of a settled ring would converge to.
pub fn settled(ks: &KeySpace, nodes: &[NodeAddress], succ_len: usize) -> Vec<RoutingState> {
    let mut sorted = nodes.to_vec();
    sorted.sort_by_key(|n| n.key);
    let x = sorted.len();
    sorted
        .iter()
        .enumerate()
        .map(|(i, &me)| {
            let mut st = RoutingState::alone(me, ks.bits());
            if x == 1 {
                return st;
            }
            let pred = sorted[(i + x - 1) % x];
            st.pred = Some(pred);
            st.lower = Some(pred.key);
            st.succs = (1..x)
                .map(|d| sorted[(i + d) % x])
                .take(succ_len.max(1))
                .collect();
            for (f, slot) in st.fingers.iter_mut().enumerate() {
                let target = ks
                    .finger_target(me.key, f as u32 + 1)
                    .expect("finger index in range");
                *slot = oracle_owner(ks, &sorted, target);
            }
            st
        })
        .collect()
}
