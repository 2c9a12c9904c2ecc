//! Per-uid vote/commit consensus.
//!
//! Each replica of a uid runs one [`PutStateMachine`]. The machine is pure:
//! it consumes [`Input`]s and returns [`Effect`]s, leaving message delivery,
//! timers and storage to its host. The same code therefore runs inside the
//! simulated node and inside the exhaustive [`explore`](super::explore)r.
//!
//! Versions are decided one at a time. The version being decided is the
//! machine's `slot`. Within a slot, replicas vote in numbered rounds:
//!
//! * a replica casts at most one vote per round;
//! * `2f+1` votes for a proposal in the replica's current round lock the
//!   replica on it and make it broadcast a commit (at most one per slot);
//! * a locked replica votes only for its locked proposal in later rounds;
//! * `f+1` commits for a proposal decide it, even if the local vote tally
//!   never reached `2f+1`;
//! * when a round stalls the replica backs off for a random interval and
//!   moves to the next round, preferring the best-supported proposal it knows.
//!
//! A replica only votes for proposals it received in a put or that carry
//! `f+1` votes, so no fabricated value can gather a vote quorum.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::keyspace::Key;

/// Message thresholds for a peer set tolerating `f` faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Thresholds {
    pub replicas: usize,
    pub votes: usize,
    pub commits: usize,
}

impl Thresholds {
    pub fn for_faults(f: usize) -> Self {
        Self {
            replicas: 3 * f + 1,
            votes: 2 * f + 1,
            commits: f + 1,
        }
    }

    /// Number of faulty replicas tolerated.
    pub fn faults(&self) -> usize {
        (self.replicas - 1) / 3
    }

    /// Minimum support that proves at least one correct replica endorses something.
    pub fn endorsement(&self) -> usize {
        self.faults() + 1
    }
}

/// `(3f+1, 2f+1, f+1)`.
pub fn thresholds(f: usize) -> Thresholds {
    Thresholds::for_faults(f)
}

/// Identity of one put attempt; retries reuse it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProposalId {
    pub client: u32,
    pub counter: u64,
}

impl fmt::Display for ProposalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}.{}", self.client, self.counter)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Proposal {
    pub uid: Key,
    pub id: ProposalId,
    pub value: Vec<u8>,
}

impl fmt::Display for Proposal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}={}",
            self.uid,
            self.id,
            String::from_utf8_lossy(&self.value)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Idle,
    Voting,
    Committing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConsensusConfig {
    pub thresholds: Thresholds,
    /// Stalled rounds tolerated before registered clients are told the put failed.
    pub max_retries: u32,
}

impl ConsensusConfig {
    pub fn new(f: usize) -> Self {
        Self {
            thresholds: Thresholds::for_faults(f),
            max_retries: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Input {
    Put(Proposal),
    Vote {
        from: usize,
        slot: u64,
        round: u32,
        proposal: Proposal,
    },
    Commit {
        from: usize,
        slot: u64,
        proposal: Proposal,
    },
    /// The round timer armed by [`Effect::ArmTimeout`] expired.
    Timeout {
        slot: u64,
        round: u32,
    },
    /// The backoff started by [`Effect::StartBackoff`] elapsed.
    BackoffElapsed {
        slot: u64,
        round: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    /// Send a vote to every other member of the peer set.
    Vote {
        slot: u64,
        round: u32,
        proposal: Proposal,
    },
    /// Send a commit to every other member of the peer set.
    Commit {
        slot: u64,
        proposal: Proposal,
    },
    /// Write `proposal` as version `slot` and acknowledge its clients.
    Decided {
        slot: u64,
        proposal: Proposal,
    },
    /// A put for an already-decided proposal arrived.
    AlreadyDecided {
        version: u64,
        id: ProposalId,
    },
    ArmTimeout {
        slot: u64,
        round: u32,
    },
    StartBackoff {
        slot: u64,
        round: u32,
    },
    /// Retries exhausted; tell clients of these proposals their put failed.
    GiveUp {
        slot: u64,
        proposals: Vec<ProposalId>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PutStateMachine {
    uid: Key,
    index: usize,
    config: ConsensusConfig,
    slot: u64,
    round: u32,
    chosen: Option<Proposal>,
    locked: Option<Proposal>,
    voted_round: Option<u32>,
    votes: BTreeMap<u32, BTreeMap<Proposal, BTreeSet<usize>>>,
    commits: BTreeMap<Proposal, BTreeSet<usize>>,
    pending: VecDeque<Proposal>,
    future: Vec<Input>,
    history: BTreeMap<u64, Proposal>,
    decided_ids: BTreeMap<ProposalId, u64>,
    backing_off: bool,
    retries: u32,
    gave_up: bool,
}

impl PutStateMachine {
    pub fn new(uid: Key, index: usize, config: ConsensusConfig) -> Self {
        Self {
            uid,
            index,
            config,
            slot: 1,
            round: 0,
            chosen: None,
            locked: None,
            voted_round: None,
            votes: BTreeMap::new(),
            commits: BTreeMap::new(),
            pending: VecDeque::new(),
            future: Vec::new(),
            history: BTreeMap::new(),
            decided_ids: BTreeMap::new(),
            backing_off: false,
            retries: 0,
            gave_up: false,
        }
    }

    pub fn uid(&self) -> Key {
        self.uid
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// The version currently being decided.
    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn phase(&self) -> Phase {
        if self.locked.is_some() {
            Phase::Committing
        } else if self.chosen.is_some() {
            Phase::Voting
        } else {
            Phase::Idle
        }
    }

    pub fn chosen(&self) -> Option<&Proposal> {
        self.chosen.as_ref()
    }

    pub fn vote_sent(&self) -> bool {
        self.voted_round == Some(self.round)
    }

    pub fn commit_sent(&self) -> bool {
        self.locked.is_some()
    }

    pub fn pending(&self) -> impl Iterator<Item = &Proposal> {
        self.pending.iter()
    }

    pub fn is_backing_off(&self) -> bool {
        self.backing_off
    }

    /// Decisions made by this machine, by version.
    pub fn history(&self) -> &BTreeMap<u64, Proposal> {
        &self.history
    }

    pub fn decided_version(&self, id: ProposalId) -> Option<u64> {
        self.decided_ids.get(&id).copied()
    }

    /// True when nothing is in flight for this uid.
    pub fn is_quiet(&self) -> bool {
        self.chosen.is_none() && self.pending.is_empty() && self.locked.is_none()
    }

    /// Distinct voters for `proposal` in `round`.
    pub fn votes_for(&self, round: u32, proposal: &Proposal) -> usize {
        self.votes
            .get(&round)
            .and_then(|m| m.get(proposal))
            .map_or(0, BTreeSet::len)
    }

    pub fn commits_for(&self, proposal: &Proposal) -> usize {
        self.commits.get(proposal).map_or(0, BTreeSet::len)
    }

    pub fn handle(&mut self, input: Input) -> Vec<Effect> {
        let mut out = Vec::new();
        let mut queue = VecDeque::from([input]);
        while let Some(input) = queue.pop_front() {
            self.apply(input, &mut out);
            while self.progress(&mut out) {
                queue.extend(self.take_buffered());
            }
        }
        out
    }

    /// Jumps to `version + 1` after the store learned `version` out of band
    /// (state transfer or recovery). Earlier versions are treated as decided.
    pub fn fast_forward(&mut self, version: u64, id: Option<ProposalId>) -> Vec<Effect> {
        let mut out = Vec::new();
        if version < self.slot {
            return out;
        }
        if let Some(id) = id {
            self.decided_ids.insert(id, version);
            self.pending.retain(|p| p.id != id);
            if self.chosen.as_ref().is_some_and(|c| c.id == id) {
                self.chosen = None;
            }
        }
        if let Some(c) = self.chosen.take() {
            self.pending.push_front(c);
        }
        self.reset_slot(version + 1);
        let mut queue: VecDeque<Input> = self.take_buffered().into();
        while self.progress(&mut out) {
            queue.extend(self.take_buffered());
        }
        while let Some(input) = queue.pop_front() {
            self.apply(input, &mut out);
            while self.progress(&mut out) {
                queue.extend(self.take_buffered());
            }
        }
        out
    }

    fn take_buffered(&mut self) -> Vec<Input> {
        let slot = self.slot;
        let (now, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.future)
            .into_iter()
            .filter(|i| input_slot(i).is_some_and(|s| s >= slot))
            .partition(|i| input_slot(i) == Some(slot));
        self.future = later;
        now
    }

    fn knows(&self, id: ProposalId) -> bool {
        self.chosen.as_ref().is_some_and(|p| p.id == id)
            || self.locked.as_ref().is_some_and(|p| p.id == id)
            || self.pending.iter().any(|p| p.id == id)
    }

    fn apply(&mut self, input: Input, out: &mut Vec<Effect>) {
        match input {
            Input::Put(p) => {
                if p.uid != self.uid {
                    return;
                }
                if let Some(&version) = self.decided_ids.get(&p.id) {
                    out.push(Effect::AlreadyDecided { version, id: p.id });
                    return;
                }
                if self.gave_up {
                    self.gave_up = false;
                    self.retries = 0;
                    if !self.backing_off {
                        out.push(Effect::ArmTimeout {
                            slot: self.slot,
                            round: self.round,
                        });
                    }
                }
                if self.knows(p.id) {
                    return;
                }
                if self.chosen.is_none() && self.locked.is_none() {
                    self.chosen = Some(p);
                } else {
                    self.pending.push_back(p);
                }
            }
            Input::Vote {
                from,
                slot,
                round,
                proposal,
            } => {
                if slot > self.slot {
                    self.future.push(Input::Vote {
                        from,
                        slot,
                        round,
                        proposal,
                    });
                    return;
                }
                if slot < self.slot || proposal.uid != self.uid {
                    return;
                }
                self.votes
                    .entry(round)
                    .or_default()
                    .entry(proposal)
                    .or_default()
                    .insert(from);
            }
            Input::Commit {
                from,
                slot,
                proposal,
            } => {
                if slot > self.slot {
                    self.future.push(Input::Commit {
                        from,
                        slot,
                        proposal,
                    });
                    return;
                }
                if slot < self.slot || proposal.uid != self.uid {
                    return;
                }
                self.commits.entry(proposal).or_default().insert(from);
            }
            Input::Timeout { slot, round } => {
                if slot != self.slot || round != self.round || self.backing_off {
                    return;
                }
                if self.phase() == Phase::Idle {
                    return;
                }
                self.retries += 1;
                if self.retries > self.config.max_retries {
                    if !self.gave_up {
                        self.gave_up = true;
                        let locked = self.locked.as_ref().map(|p| p.id);
                        let proposals = self
                            .chosen
                            .iter()
                            .chain(self.pending.iter())
                            .map(|p| p.id)
                            .filter(|id| Some(*id) != locked)
                            .collect();
                        out.push(Effect::GiveUp {
                            slot: self.slot,
                            proposals,
                        });
                    }
                    return;
                }
                self.backing_off = true;
                out.push(Effect::StartBackoff { slot, round });
            }
            Input::BackoffElapsed { slot, round } => {
                if slot != self.slot || round != self.round || !self.backing_off {
                    return;
                }
                self.backing_off = false;
                let next = self.round + 1;
                self.round = self.highest_endorsed_round().map_or(next, |r| r.max(next));
            }
        }
    }

    fn voters(&self, round: u32) -> usize {
        self.votes
            .get(&round)
            .map_or(0, |m| m.values().flatten().collect::<BTreeSet<_>>().len())
    }

    /// Highest round with at least `f+1` distinct voters.
    fn highest_endorsed_round(&self) -> Option<u32> {
        let need = self.config.thresholds.endorsement();
        self.votes
            .keys()
            .rev()
            .copied()
            .find(|&r| self.voters(r) >= need)
    }

    /// Proposals with `f+1` votes in some round of the current slot.
    fn endorsed(&self) -> BTreeSet<&Proposal> {
        let need = self.config.thresholds.endorsement();
        self.votes
            .values()
            .flat_map(|m| m.iter())
            .filter(|(_, v)| v.len() >= need)
            .map(|(p, _)| p)
            .collect()
    }

    fn support(&self, p: &Proposal) -> (usize, usize) {
        let current = self.votes_for(self.round, p);
        let earlier = self
            .votes
            .range(..self.round)
            .filter_map(|(_, m)| m.get(p))
            .map(BTreeSet::len)
            .sum();
        (current, earlier)
    }

    /// The proposal this replica votes for in its current round.
    fn vote_choice(&mut self) -> Option<Proposal> {
        if let Some(l) = &self.locked {
            return Some(l.clone());
        }
        if self.round == 0 {
            return self.chosen.clone();
        }
        let mut candidates: Vec<Proposal> = self
            .chosen
            .iter()
            .chain(self.pending.iter())
            .cloned()
            .collect();
        for p in self.endorsed() {
            if !candidates.contains(p) {
                candidates.push(p.clone());
            }
        }
        let best = candidates.into_iter().max_by(|a, b| {
            self.support(a)
                .cmp(&self.support(b))
                .then_with(|| b.id.cmp(&a.id))
        })?;
        self.adopt(best.clone());
        Some(best)
    }

    /// Makes `p` the chosen proposal, moving the previous choice back to pending.
    fn adopt(&mut self, p: Proposal) {
        if self.chosen.as_ref() == Some(&p) {
            return;
        }
        self.pending.retain(|q| q != &p);
        if let Some(prev) = self.chosen.replace(p) {
            if !self.decided_ids.contains_key(&prev.id) {
                self.pending.push_front(prev);
            }
        }
    }

    /// Applies threshold rules until nothing changes. Returns true if a
    /// version was decided, in which case the caller replays buffered input.
    fn progress(&mut self, out: &mut Vec<Effect>) -> bool {
        let th = self.config.thresholds;
        loop {
            let decided = self
                .commits
                .iter()
                .find(|(_, from)| from.len() >= th.commits)
                .map(|(p, _)| p.clone());
            if let Some(p) = decided {
                self.decide(p, out);
                return true;
            }
            if self.backing_off {
                return false;
            }
            if let Some(r) = self.highest_endorsed_round() {
                if r > self.round {
                    self.round = r;
                }
            }
            if self.chosen.is_none() && self.locked.is_none() {
                if let Some(p) = self.pending.pop_front() {
                    self.chosen = Some(p);
                } else if let Some(p) = self
                    .endorsed()
                    .into_iter()
                    .max_by(|a, b| {
                        self.support(a)
                            .cmp(&self.support(b))
                            .then_with(|| b.id.cmp(&a.id))
                    })
                    .cloned()
                {
                    self.chosen = Some(p);
                }
            }
            if self.voted_round != Some(self.round) {
                if let Some(p) = self.vote_choice() {
                    self.voted_round = Some(self.round);
                    self.votes
                        .entry(self.round)
                        .or_default()
                        .entry(p.clone())
                        .or_default()
                        .insert(self.index);
                    out.push(Effect::Vote {
                        slot: self.slot,
                        round: self.round,
                        proposal: p,
                    });
                    if !self.gave_up {
                        out.push(Effect::ArmTimeout {
                            slot: self.slot,
                            round: self.round,
                        });
                    }
                    continue;
                }
            }
            if self.locked.is_none() {
                let quorum = self.votes.get(&self.round).and_then(|m| {
                    m.iter()
                        .find(|(_, from)| from.len() >= th.votes)
                        .map(|(p, _)| p.clone())
                });
                if let Some(p) = quorum {
                    self.adopt(p.clone());
                    self.locked = Some(p.clone());
                    self.commits
                        .entry(p.clone())
                        .or_default()
                        .insert(self.index);
                    out.push(Effect::Commit {
                        slot: self.slot,
                        proposal: p,
                    });
                    continue;
                }
            }
            return false;
        }
    }

    fn decide(&mut self, p: Proposal, out: &mut Vec<Effect>) {
        let slot = self.slot;
        self.decided_ids.insert(p.id, slot);
        self.history.insert(slot, p.clone());
        self.pending.retain(|q| q.id != p.id);
        if let Some(c) = self.chosen.take() {
            if c.id != p.id {
                self.pending.push_front(c);
            }
        }
        out.push(Effect::Decided { slot, proposal: p });
        self.reset_slot(slot + 1);
    }

    fn reset_slot(&mut self, slot: u64) {
        self.slot = slot;
        self.round = 0;
        self.chosen = None;
        self.locked = None;
        self.voted_round = None;
        self.votes.clear();
        self.commits.clear();
        self.backing_off = false;
        self.retries = 0;
        self.gave_up = false;
    }
}

fn input_slot(i: &Input) -> Option<u64> {
    match i {
        Input::Vote { slot, .. } | Input::Commit { slot, .. } => Some(*slot),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(client: u32, value: &str) -> Proposal {
        Proposal {
            uid: Key(42),
            id: ProposalId { client, counter: 0 },
            value: value.as_bytes().to_vec(),
        }
    }

    fn machine(index: usize) -> PutStateMachine {
        PutStateMachine::new(Key(42), index, ConsensusConfig::new(1))
    }

    fn votes(out: &[Effect]) -> Vec<&Proposal> {
        out.iter()
            .filter_map(|e| match e {
                Effect::Vote { proposal, .. } => Some(proposal),
                _ => None,
            })
            .collect()
    }

    fn commits(out: &[Effect]) -> Vec<&Proposal> {
        out.iter()
            .filter_map(|e| match e {
                Effect::Commit { proposal, .. } => Some(proposal),
                _ => None,
            })
            .collect()
    }

    fn vote(from: usize, round: u32, p: &Proposal) -> Input {
        Input::Vote {
            from,
            slot: 1,
            round,
            proposal: p.clone(),
        }
    }

    fn commit(from: usize, p: &Proposal) -> Input {
        Input::Commit {
            from,
            slot: 1,
            proposal: p.clone(),
        }
    }

    #[test]
    fn threshold_values() {
        assert_eq!(
            thresholds(1),
            Thresholds {
                replicas: 4,
                votes: 3,
                commits: 2
            }
        );
        assert_eq!(
            thresholds(0),
            Thresholds {
                replicas: 1,
                votes: 1,
                commits: 1
            }
        );
        assert_eq!(
            thresholds(2),
            Thresholds {
                replicas: 7,
                votes: 5,
                commits: 3
            }
        );
    }

    #[test]
    fn idle_put_casts_one_vote() {
        let mut m = machine(0);
        let a = prop(1, "a");
        let out = m.handle(Input::Put(a.clone()));
        assert_eq!(votes(&out), vec![&a]);
        assert_eq!(m.phase(), Phase::Voting);
        assert!(m.vote_sent());
        assert!(!m.commit_sent());
    }

    #[test]
    fn engaged_put_is_queued_without_vote() {
        let mut m = machine(0);
        let a = prop(1, "a");
        let b = prop(2, "b");
        m.handle(Input::Put(a.clone()));
        let out = m.handle(Input::Put(b.clone()));
        assert!(votes(&out).is_empty());
        assert_eq!(m.pending().collect::<Vec<_>>(), vec![&b]);
        assert_eq!(m.chosen(), Some(&a));
    }

    #[test]
    fn third_vote_triggers_commit_broadcast() {
        let mut m = machine(0);
        let a = prop(1, "a");
        m.handle(Input::Put(a.clone()));
        assert!(commits(&m.handle(vote(1, 0, &a))).is_empty());
        let out = m.handle(vote(2, 0, &a));
        assert_eq!(commits(&out), vec![&a]);
        assert_eq!(m.phase(), Phase::Committing);
    }

    #[test]
    fn duplicate_votes_count_once() {
        let mut m = machine(0);
        let a = prop(1, "a");
        m.handle(Input::Put(a.clone()));
        m.handle(vote(1, 0, &a));
        let out = m.handle(vote(1, 0, &a));
        assert!(commits(&out).is_empty());
        assert_eq!(m.votes_for(0, &a), 2);
    }

    #[test]
    fn quorum_for_rival_preempts_local_choice() {
        let mut m = machine(0);
        let a = prop(1, "a");
        let b = prop(2, "b");
        m.handle(Input::Put(a.clone()));
        m.handle(Input::Put(b.clone()));
        m.handle(vote(1, 0, &b));
        m.handle(vote(2, 0, &b));
        let out = m.handle(vote(3, 0, &b));
        assert_eq!(commits(&out), vec![&b]);
        assert_eq!(m.chosen(), Some(&b));
        assert_eq!(m.pending().collect::<Vec<_>>(), vec![&a]);
    }

    #[test]
    fn second_commit_decides_and_starts_next_pending() {
        let mut m = machine(0);
        let a = prop(1, "a");
        let b = prop(2, "b");
        m.handle(Input::Put(a.clone()));
        m.handle(Input::Put(b.clone()));
        m.handle(commit(1, &a));
        let out = m.handle(commit(2, &a));
        assert!(out.contains(&Effect::Decided {
            slot: 1,
            proposal: a.clone()
        }));
        assert_eq!(m.slot(), 2);
        assert_eq!(m.chosen(), Some(&b));
        assert!(out.contains(&Effect::Vote {
            slot: 2,
            round: 0,
            proposal: b.clone()
        }));
    }

    #[test]
    fn commit_quorum_decides_without_local_vote_quorum() {
        let mut m = machine(3);
        let a = prop(1, "a");
        m.handle(commit(0, &a));
        let out = m.handle(commit(1, &a));
        assert!(matches!(out[0], Effect::Decided { slot: 1, .. }));
    }

    #[test]
    fn commit_for_decided_proposal_is_ignored() {
        let mut m = machine(0);
        let a = prop(1, "a");
        m.handle(commit(1, &a));
        m.handle(commit(2, &a));
        let out = m.handle(commit(3, &a));
        assert!(out.is_empty());
        assert_eq!(m.history().len(), 1);
    }

    #[test]
    fn put_for_decided_proposal_reacks() {
        let mut m = machine(0);
        let a = prop(1, "a");
        m.handle(commit(1, &a));
        m.handle(commit(2, &a));
        let out = m.handle(Input::Put(a.clone()));
        assert_eq!(
            out,
            vec![Effect::AlreadyDecided {
                version: 1,
                id: a.id
            }]
        );
    }

    #[test]
    fn votes_for_future_slot_are_buffered() {
        let mut m = machine(0);
        let a = prop(1, "a");
        let b = prop(2, "b");
        for from in 1..3 {
            m.handle(Input::Vote {
                from,
                slot: 2,
                round: 0,
                proposal: b.clone(),
            });
        }
        assert_eq!(m.votes_for(0, &b), 0);
        m.handle(commit(1, &a));
        m.handle(commit(2, &a));
        // slot 2 now sees the buffered votes plus its own adoption of b
        assert_eq!(m.slot(), 2);
        assert_eq!(m.votes_for(0, &b), 3);
        assert!(m.commit_sent());
    }

    #[test]
    fn idle_replica_adopts_endorsed_proposal() {
        let mut m = machine(3);
        let a = prop(1, "a");
        assert!(m.handle(vote(0, 0, &a)).is_empty());
        let out = m.handle(vote(1, 0, &a));
        assert_eq!(votes(&out), vec![&a]);
    }

    #[test]
    fn single_unendorsed_vote_is_not_adopted() {
        let mut m = machine(3);
        let fabricated = prop(9, "evil");
        let out = m.handle(vote(0, 0, &fabricated));
        assert!(out.is_empty());
        assert_eq!(m.phase(), Phase::Idle);
    }

    #[test]
    fn timeout_backs_off_then_moves_round() {
        let mut m = machine(0);
        let a = prop(1, "a");
        let b = prop(2, "b");
        m.handle(Input::Put(a.clone()));
        m.handle(Input::Put(b.clone()));
        m.handle(vote(1, 0, &b));
        m.handle(vote(2, 0, &b));
        let out = m.handle(Input::Timeout { slot: 1, round: 0 });
        assert_eq!(out, vec![Effect::StartBackoff { slot: 1, round: 0 }]);
        assert!(m.is_backing_off());
        let out = m.handle(Input::BackoffElapsed { slot: 1, round: 0 });
        assert_eq!(m.round(), 1);
        // b carried more support in round 0, so the new round votes b
        assert_eq!(votes(&out), vec![&b]);
    }

    #[test]
    fn stale_timeouts_are_ignored() {
        let mut m = machine(0);
        m.handle(Input::Put(prop(1, "a")));
        assert!(m.handle(Input::Timeout { slot: 1, round: 5 }).is_empty());
        assert!(m.handle(Input::Timeout { slot: 0, round: 0 }).is_empty());
    }

    #[test]
    fn idle_timeout_is_a_no_op() {
        let mut m = machine(0);
        assert!(m.handle(Input::Timeout { slot: 1, round: 0 }).is_empty());
        assert_eq!(m.phase(), Phase::Idle);
    }

    #[test]
    fn retries_exhausted_reports_give_up() {
        let mut m = PutStateMachine::new(
            Key(42),
            0,
            ConsensusConfig {
                thresholds: Thresholds::for_faults(1),
                max_retries: 1,
            },
        );
        let a = prop(1, "a");
        m.handle(Input::Put(a.clone()));
        m.handle(Input::Timeout { slot: 1, round: 0 });
        m.handle(Input::BackoffElapsed { slot: 1, round: 0 });
        let out = m.handle(Input::Timeout { slot: 1, round: 1 });
        assert_eq!(
            out,
            vec![Effect::GiveUp {
                slot: 1,
                proposals: vec![a.id]
            }]
        );
    }

    #[test]
    fn locked_replica_keeps_voting_its_lock() {
        let mut m = machine(0);
        let a = prop(1, "a");
        let b = prop(2, "b");
        m.handle(Input::Put(a.clone()));
        m.handle(Input::Put(b.clone()));
        m.handle(vote(1, 0, &a));
        m.handle(vote(2, 0, &a));
        assert!(m.commit_sent());
        for from in 1..3 {
            m.handle(vote(from, 1, &b));
        }
        // jumped to round 1 on f+1 voters, still votes a
        assert_eq!(m.round(), 1);
        assert_eq!(m.votes_for(1, &a), 1);
    }

    #[test]
    fn fast_forward_skips_to_next_version() {
        let mut m = machine(0);
        let b = prop(2, "b");
        m.handle(Input::Vote {
            from: 1,
            slot: 8,
            round: 0,
            proposal: b.clone(),
        });
        m.fast_forward(7, None);
        assert_eq!(m.slot(), 8);
        assert_eq!(m.votes_for(0, &b), 1);
    }

    #[test]
    fn f_zero_decides_alone() {
        let mut m = PutStateMachine::new(Key(1), 0, ConsensusConfig::new(0));
        let p = Proposal {
            uid: Key(1),
            id: ProposalId {
                client: 0,
                counter: 0,
            },
            value: b"x".to_vec(),
        };
        let out = m.handle(Input::Put(p.clone()));
        assert!(out.contains(&Effect::Decided {
            slot: 1,
            proposal: p
        }));
    }
}
