//! Exhaustive schedule exploration of one uid's consensus.
//!
//! Builds a closed world of `3f+1` [`PutStateMachine`]s, hands every live
//! replica a put for each concurrent proposal, and enumerates every schedule
//! in which each message takes one or two ticks. Messages that land on the
//! same replica in the same tick are handled in send order, as the simulator
//! does. A round timeout expires a fixed number of ticks after it is armed,
//! each backoff lasts one of two durations, and each replica may time out a
//! bounded number of times.
//!
//! Within a tick replicas take turns, so a state is the replicas plus whose
//! turn it is. Messages for versions a replica has already passed are
//! dropped from its queue, since the machine ignores them.
//!
//! Every reached state is checked for:
//! * **Agreement**: correct replicas that decided a version decided the same proposal;
//! * **Validity**: every decided proposal is one a client actually proposed.

use std::cell::RefCell;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use serde::Serialize;

use super::consensus::{
    ConsensusConfig, Effect, Input, Proposal, ProposalId, PutStateMachine, Thresholds,
};
use crate::keyspace::Key;
use xxhash_rust::xxh3::xxh3_128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplicaFault {
    /// Never receives or sends.
    Crashed,
    /// Runs honestly but every vote and commit it sends names a corrupted value.
    WrongValue,
}

#[derive(Debug, Clone)]
pub struct ExploreConfig {
    pub f: usize,
    pub proposals: usize,
    /// Round timeouts each replica may experience.
    pub max_timeouts: u8,
    /// Ticks from arming a round timeout to its expiry.
    pub timeout_ticks: u8,
    /// The backoff durations a replica may pick from.
    pub backoff_ticks: [u8; 2],
    /// Messages for versions beyond this are not delivered.
    pub max_slot: u64,
    pub faults: Vec<(usize, ReplicaFault)>,
    /// Replaces the standard thresholds (used to check the checker).
    pub thresholds: Option<Thresholds>,
    /// Abort after this many distinct states.
    pub state_limit: usize,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self {
            f: 1,
            proposals: 2,
            max_timeouts: 1,
            timeout_ticks: 4,
            backoff_ticks: [1, 2],
            max_slot: 3,
            faults: Vec::new(),
            thresholds: None,
            state_limit: 20_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    Agreement,
    Validity,
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
    pub step: u32,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ExploreReport {
    pub states: usize,
    pub transitions: u64,
    pub terminal_states: u64,
    /// Terminal states in which every correct replica decided every proposal.
    pub fully_decided_terminals: u64,
    pub max_step: u32,
    pub violations: Vec<Violation>,
    pub truncated: bool,
}

impl ExploreReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && !self.truncated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Status {
    /// Sent during the current tick.
    New,
    /// Sent last tick: arrives this tick or the next.
    Fresh,
    /// Arrives the next time its replica steps.
    Due,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Replica {
    machine: PutStateMachine,
    queue: Vec<(Status, Input)>,
    /// Armed timer and the ticks left until it expires.
    timer: Option<(Input, u8)>,
    timeouts_used: u8,
}

#[derive(Clone)]
struct World {
    replicas: Vec<Rc<Replica>>,
    /// Fingerprint of each replica, kept in step with `replicas`.
    prints: Vec<u128>,
    /// Next replica to step in the current tick.
    cursor: usize,
}

/// One way a replica's step can play out.
#[derive(Clone, PartialEq, Eq, Hash)]
struct Outcome {
    replica: Replica,
    sent: Vec<(usize, Input)>,
}

pub const EXPLORE_UID: Key = Key(7);

/// Collects the hashed bytes so they can be digested in one pass.
struct Bytes<'a>(&'a mut Vec<u8>);

impl Hasher for Bytes<'_> {
    fn write(&mut self, bytes: &[u8]) {
        self.0.extend_from_slice(bytes);
    }

    fn finish(&self) -> u64 {
        unreachable!("digested with xxh3")
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn fingerprint<T: Hash + ?Sized>(w: &T) -> u128 {
    SCRATCH.with_borrow_mut(|buf| {
        buf.clear();
        w.hash(&mut Bytes(buf));
        xxh3_128(buf)
    })
}

impl World {
    fn new(replicas: Vec<Replica>) -> Self {
        let prints = replicas.iter().map(fingerprint).collect();
        Self {
            replicas: replicas.into_iter().map(Rc::new).collect(),
            prints,
            cursor: 0,
        }
    }

    fn fingerprint(&self) -> u128 {
        fingerprint(&(self.cursor, &self.prints))
    }
}

fn corrupt(p: &Proposal) -> Proposal {
    let mut q = p.clone();
    q.value.iter_mut().for_each(|b| *b ^= 0xff);
    q.value.push(0);
    q
}

fn slot_of(input: &Input) -> Option<u64> {
    match input {
        Input::Vote { slot, .. } | Input::Commit { slot, .. } => Some(*slot),
        _ => None,
    }
}

struct Explorer {
    config: ExploreConfig,
    replicas: usize,
    faults: Vec<Option<ReplicaFault>>,
    proposals: Vec<Proposal>,
    seen: HashSet<u128>,
    report: ExploreReport,
}

impl Explorer {
    fn new(config: ExploreConfig) -> Self {
        let thresholds = config
            .thresholds
            .unwrap_or_else(|| Thresholds::for_faults(config.f));
        let replicas = thresholds.replicas;
        let mut faults = vec![None; replicas];
        for &(i, kind) in &config.faults {
            faults[i] = Some(kind);
        }
        let proposals = (0..config.proposals)
            .map(|c| Proposal {
                uid: EXPLORE_UID,
                id: ProposalId {
                    client: c as u32,
                    counter: 0,
                },
                value: vec![b'A' + c as u8],
            })
            .collect();
        Self {
            config,
            replicas,
            faults,
            proposals,
            seen: HashSet::new(),
            report: ExploreReport::default(),
        }
    }

    fn is_correct(&self, i: usize) -> bool {
        self.faults[i].is_none()
    }

    fn live(&self, i: usize) -> bool {
        self.faults[i] != Some(ReplicaFault::Crashed)
    }

    fn initial(&self) -> World {
        let thresholds = self
            .config
            .thresholds
            .unwrap_or_else(|| Thresholds::for_faults(self.config.f));
        let cc = ConsensusConfig {
            thresholds,
            max_retries: u32::MAX,
        };
        let replicas = (0..self.replicas)
            .map(|i| Replica {
                machine: PutStateMachine::new(EXPLORE_UID, i, cc),
                queue: if self.live(i) {
                    self.proposals
                        .iter()
                        .map(|p| (Status::Fresh, Input::Put(p.clone())))
                        .collect()
                } else {
                    Vec::new()
                },
                timer: None,
                timeouts_used: 0,
            })
            .collect();
        World::new(replicas)
    }

    fn feed(&self, from: usize, o: &mut Outcome, input: Input) {
        let wrong = self.faults[from] == Some(ReplicaFault::WrongValue);
        for e in o.replica.machine.handle(input) {
            match e {
                Effect::Vote {
                    slot,
                    round,
                    proposal,
                } if slot <= self.config.max_slot => {
                    let proposal = if wrong { corrupt(&proposal) } else { proposal };
                    for to in (0..self.replicas).filter(|&j| j != from && self.live(j)) {
                        o.sent.push((
                            to,
                            Input::Vote {
                                from,
                                slot,
                                round,
                                proposal: proposal.clone(),
                            },
                        ));
                    }
                }
                Effect::Commit { slot, proposal } if slot <= self.config.max_slot => {
                    let proposal = if wrong { corrupt(&proposal) } else { proposal };
                    for to in (0..self.replicas).filter(|&j| j != from && self.live(j)) {
                        o.sent.push((
                            to,
                            Input::Commit {
                                from,
                                slot,
                                proposal: proposal.clone(),
                            },
                        ));
                    }
                }
                Effect::ArmTimeout { slot, round } => {
                    o.replica.timer = (slot <= self.config.max_slot
                        && o.replica.timeouts_used < self.config.max_timeouts)
                        .then_some((Input::Timeout { slot, round }, self.config.timeout_ticks));
                }
                Effect::StartBackoff { slot, round } => {
                    // The duration is chosen by the caller.
                    o.replica.timer = Some((Input::BackoffElapsed { slot, round }, 0));
                }
                _ => {}
            }
        }
    }

    /// Drops state the machine can no longer react to.
    fn tidy(&self, r: &mut Replica) {
        let m = &r.machine;
        let slot = m.slot();
        r.queue
            .retain(|(_, input)| slot_of(input).is_none_or(|s| s >= slot));
        let stale = match r.timer.as_ref().map(|(t, _)| t) {
            Some(Input::Timeout { slot, round }) => {
                *slot != m.slot()
                    || *round != m.round()
                    || m.is_backing_off()
                    || m.chosen().is_none()
                    || r.timeouts_used >= self.config.max_timeouts
            }
            Some(Input::BackoffElapsed { slot, round }) => *slot != m.slot() || *round != m.round(),
            _ => false,
        };
        if stale {
            r.timer = None;
        }
    }

    /// Every distinct way replica `i` can take its step this tick.
    fn local_outcomes(&self, i: usize, r: &Replica) -> Vec<Outcome> {
        let start = Outcome {
            replica: Replica {
                machine: r.machine.clone(),
                queue: Vec::new(),
                timer: r.timer.clone(),
                timeouts_used: r.timeouts_used,
            },
            sent: Vec::new(),
        };
        let mut leaves = Vec::new();
        self.deliver(i, &r.queue, start, &mut leaves);
        let mut all: Vec<Outcome> = Vec::new();
        let mut seen: HashSet<u128> = HashSet::new();
        for mut o in leaves {
            self.tidy(&mut o.replica);
            let mut outs = vec![o];
            if let Some((_, left)) = &mut outs[0].replica.timer {
                *left = left.saturating_sub(1);
            }
            if let Some((t, 0)) = outs[0].replica.timer.clone() {
                let mut o = outs.pop().expect("outcome");
                o.replica.timer = None;
                if matches!(t, Input::Timeout { .. }) {
                    o.replica.timeouts_used += 1;
                }
                self.feed(i, &mut o, t);
                self.tidy(&mut o.replica);
                match &o.replica.timer {
                    Some((Input::BackoffElapsed { .. }, 0)) => {
                        for ticks in self.config.backoff_ticks {
                            let mut b = o.clone();
                            b.replica.timer.as_mut().expect("backoff").1 = ticks;
                            outs.push(b);
                        }
                    }
                    _ => outs.push(o),
                }
            }
            for o in outs {
                if seen.insert(fingerprint(&o)) {
                    all.push(o);
                }
            }
        }
        all
    }

    /// Walks the queue in send order, branching on whether each fresh
    /// message arrives now or next tick.
    fn deliver(
        &self,
        i: usize,
        rest: &[(Status, Input)],
        mut o: Outcome,
        leaves: &mut Vec<Outcome>,
    ) {
        for (k, (status, input)) in rest.iter().enumerate() {
            if slot_of(input).is_some_and(|s| s < o.replica.machine.slot()) {
                continue;
            }
            match status {
                Status::Due => self.feed(i, &mut o, input.clone()),
                Status::New => o.replica.queue.push((Status::New, input.clone())),
                Status::Fresh => {
                    let mut later = o.clone();
                    later.replica.queue.push((Status::Due, input.clone()));
                    self.deliver(i, &rest[k + 1..], later, leaves);
                    self.feed(i, &mut o, input.clone());
                }
            }
        }
        leaves.push(o);
    }

    fn successors(&self, w: &World) -> Vec<World> {
        let i = w.cursor;
        let outcomes = if self.live(i) {
            self.local_outcomes(i, &w.replicas[i])
        } else {
            vec![Outcome {
                replica: (*w.replicas[i]).clone(),
                sent: Vec::new(),
            }]
        };
        outcomes
            .into_iter()
            .map(|o| {
                let mut next = w.clone();
                let mut touched = vec![false; self.replicas];
                next.replicas[i] = Rc::new(o.replica);
                touched[i] = true;
                for (to, input) in o.sent {
                    if slot_of(&input).is_none_or(|s| s >= next.replicas[to].machine.slot()) {
                        Rc::make_mut(&mut next.replicas[to])
                            .queue
                            .push((Status::New, input));
                        touched[to] = true;
                    }
                }
                next.cursor = (i + 1) % self.replicas;
                if next.cursor == 0 {
                    for (j, r) in next.replicas.iter_mut().enumerate() {
                        if r.queue.iter().any(|(s, _)| *s == Status::New) {
                            for (s, _) in &mut Rc::make_mut(r).queue {
                                if *s == Status::New {
                                    *s = Status::Fresh;
                                }
                            }
                            touched[j] = true;
                        }
                    }
                }
                for (j, t) in touched.into_iter().enumerate() {
                    if t {
                        next.prints[j] = fingerprint(&*next.replicas[j]);
                    }
                }
                next
            })
            .collect()
    }

    fn is_terminal(&self, w: &World) -> bool {
        w.replicas
            .iter()
            .enumerate()
            .all(|(i, r)| !self.live(i) || (r.queue.is_empty() && r.timer.is_none()))
    }

    fn check(&mut self, w: &World, step: u32) {
        let w = &w.replicas;
        let correct: Vec<usize> = (0..self.replicas).filter(|&i| self.is_correct(i)).collect();
        for &i in &correct {
            for (slot, p) in w[i].machine.history() {
                if !self.proposals.contains(p) {
                    self.report.violations.push(Violation {
                        kind: ViolationKind::Validity,
                        detail: format!("replica {i} decided unproposed {p} at version {slot}"),
                        step,
                    });
                }
                for &j in correct.iter().filter(|&&j| j > i) {
                    if let Some(q) = w[j].machine.history().get(slot) {
                        if q != p {
                            self.report.violations.push(Violation {
                                kind: ViolationKind::Agreement,
                                detail: format!("version {slot}: replica {i} decided {p}, replica {j} decided {q}"),
                                step,
                            });
                        }
                    }
                }
            }
        }
    }

    fn run(mut self) -> ExploreReport {
        let init = self.initial();
        self.seen.insert(init.fingerprint());
        let mut stack = vec![(init, 0u32)];
        self.report.states = 1;
        while let Some((w, step)) = stack.pop() {
            self.report.max_step = self.report.max_step.max(step);
            if self.is_terminal(&w) {
                self.report.terminal_states += 1;
                let all = (0..self.replicas).filter(|&i| self.is_correct(i)).all(|i| {
                    self.proposals
                        .iter()
                        .all(|p| w.replicas[i].machine.decided_version(p.id).is_some())
                });
                if all {
                    self.report.fully_decided_terminals += 1;
                }
                continue;
            }
            for n in self.successors(&w) {
                self.report.transitions += 1;
                if self.seen.insert(n.fingerprint()) {
                    self.report.states += 1;
                    self.check(&n, step + 1);
                    if self.report.violations.len() >= 16 {
                        return self.report;
                    }
                    if self.report.states >= self.config.state_limit {
                        self.report.truncated = true;
                        return self.report;
                    }
                    stack.push((n, step + 1));
                }
            }
        }
        self.report
    }
}

/// Enumerates every reachable state of the configured world.
pub fn explore(config: ExploreConfig) -> ExploreReport {
    Explorer::new(config).run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_proposal_always_decides() {
        let report = explore(ExploreConfig {
            proposals: 1,
            max_timeouts: 0,
            ..ExploreConfig::default()
        });
        assert!(report.is_clean(), "{report:?}");
        assert!(report.terminal_states > 0);
        assert_eq!(report.terminal_states, report.fully_decided_terminals);
    }

    #[test]
    fn crashed_replica_still_decides() {
        let report = explore(ExploreConfig {
            proposals: 1,
            max_timeouts: 0,
            faults: vec![(3, ReplicaFault::Crashed)],
            ..ExploreConfig::default()
        });
        assert!(report.is_clean());
        assert_eq!(report.terminal_states, report.fully_decided_terminals);
    }

    #[test]
    fn weakened_commit_threshold_is_caught() {
        let report = explore(ExploreConfig {
            proposals: 2,
            max_timeouts: 0,
            thresholds: Some(Thresholds {
                replicas: 4,
                votes: 2,
                commits: 1,
            }),
            ..ExploreConfig::default()
        });
        assert!(!report.violations.is_empty());
    }
}
