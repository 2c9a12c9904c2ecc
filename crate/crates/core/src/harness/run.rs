//! Builds a simulation from a resolved scenario and drives it to the end.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles;
use super::report::{FaultModel, LookupStats, NodeSummary, RecoverySummary, RunReport};
use super::scenario::{Check, Resolved, Scenario, ScenarioError};
use crate::client::{Client, ScriptedOp};
use crate::keyspace::Key;
use crate::node::{Node, Participant};
use crate::overlay::{oracle_owner, settled, LookupOutcome};
use crate::protocol::Timer;
use crate::simnet::{
    ActorId, FaultKind, FaultSpec, NetConfig, NodeAddress, Sim, SimError, TraceLog,
};

/// One lookup probe and the owner the brute-force scan expected.
#[derive(Debug, Clone)]
pub struct ProbeRecord {
    pub entry: ActorId,
    pub target: Key,
    pub expected: NodeAddress,
}

/// A finished simulation, before any oracle ran.
pub struct World<'a> {
    pub resolved: &'a Resolved,
    pub sim: Sim<Participant>,
    /// Ring nodes: the initial ring in key order, then joiners.
    pub nodes: Vec<ActorId>,
    pub clients: Vec<ActorId>,
    pub probes: Vec<ProbeRecord>,
    pub ring_at_probe: usize,
    pub error: Option<SimError>,
}

impl World<'_> {
    pub fn node(&self, id: ActorId) -> &Node {
        self.sim.actor(id).as_node().expect("ring node")
    }

    pub fn client(&self, id: ActorId) -> &Client {
        self.sim.actor(id).as_client().expect("client")
    }

    pub fn is_byzantine(&self, id: ActorId) -> bool {
        self.sim.net.byzantine_kind(id).is_some()
    }

    /// Ring members that have not crashed and finished joining.
    pub fn live_ring(&self) -> Vec<NodeAddress> {
        live_ring(&self.sim, &self.nodes)
    }

    /// Lookup outcomes of every probe, paired with the expected owner.
    pub fn probe_results(&self) -> Vec<(&ProbeRecord, Option<&LookupOutcome<u64>>)> {
        let mut by_node: BTreeMap<(ActorId, Key), Vec<&LookupOutcome<u64>>> = BTreeMap::new();
        for id in &self.nodes {
            for out in self.node(*id).probes() {
                by_node.entry((*id, out.target)).or_default().push(out);
            }
        }
        self.probes
            .iter()
            .map(|p| {
                let got = by_node.get_mut(&(p.entry, p.target)).and_then(|v| v.pop());
                (p, got)
            })
            .collect()
    }
}

fn live_ring(sim: &Sim<Participant>, nodes: &[ActorId]) -> Vec<NodeAddress> {
    nodes
        .iter()
        .filter(|id| !sim.net.is_crashed(**id))
        .filter_map(|id| sim.actor(*id).as_node())
        .filter(|n| n.overlay.is_joined())
        .map(Node::address)
        .collect()
}

/// Everything a run produced.
pub struct RunArtifacts {
    pub report: RunReport,
    pub trace: TraceLog,
}

/// Parses, resolves and runs a scenario, overriding its seed when given.
pub fn run_text(text: &str, seed: Option<u64>) -> Result<RunArtifacts, ScenarioError> {
    let mut scenario = Scenario::parse(text)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    run_scenario(&scenario)
}

pub fn run_scenario(scenario: &Scenario) -> Result<RunArtifacts, ScenarioError> {
    let resolved = scenario.resolve()?;
    Ok(run(&resolved))
}

/// Runs a resolved scenario and evaluates its oracles.
pub fn run(resolved: &Resolved) -> RunArtifacts {
    let world = simulate(resolved);
    let replay = resolved
        .checks
        .contains(&Check::Determinism)
        .then(|| simulate(resolved).sim.net.trace().digest());
    let report = build_report(&world, replay);
    RunArtifacts {
        report,
        trace: world.sim.net.into_trace(),
    }
}

pub fn simulate(resolved: &Resolved) -> World<'_> {
    let sc = &resolved.scenario;
    let ks = resolved.ks;
    let mut sim: Sim<Participant> = Sim::new(NetConfig {
        seed: sc.seed,
        delay: sc.network.delay,
        max_events: sc.network.max_events,
        keep_ring_records: false,
    });

    let initial: Vec<NodeAddress> = resolved
        .keys
        .iter()
        .enumerate()
        .map(|(i, k)| NodeAddress {
            id: ActorId(i as u32),
            key: *k,
        })
        .collect();
    let states = settled(&ks, &initial, sc.node.overlay.successors);
    let mut nodes = Vec::new();
    for st in states {
        nodes.push(sim.add(Participant::Node(Box::new(Node::new(
            ks, sc.f, sc.node, st,
        )))));
    }
    for j in &resolved.joins {
        let id = ActorId(sim.actors.len() as u32);
        let me = NodeAddress {
            id,
            key: Key(j.key),
        };
        let node = Node::joining(ks, sc.f, sc.node, me, initial[j.via]);
        nodes.push(sim.add(Participant::Node(Box::new(node))));
    }

    let n = initial.len();
    let mut clients = Vec::new();
    for (cid, ops) in &resolved.clients {
        let k = resolved.entry_nodes;
        let entries = (0..k)
            .map(|i| initial[(i * n / k + *cid as usize) % n])
            .collect();
        let script = ops
            .iter()
            .map(|o| ScriptedOp {
                at: o.at,
                op: o.op.clone(),
            })
            .collect();
        let client = Client::new(*cid, ks, sc.f, sc.client.clone(), entries, script);
        clients.push(sim.add(Participant::Client(Box::new(client))));
    }

    for id in nodes.iter().take(n) {
        sim.with_actor(*id, |p, ctx| {
            let node = p.as_node_mut().expect("ring node");
            let phase = node.overlay.random_phase(ctx);
            node.overlay.start_maintenance(ctx, phase);
        });
    }
    for (j, id) in resolved.joins.iter().zip(&nodes[n..]) {
        sim.with_actor(*id, |_, ctx| ctx.set_timer(j.at, Timer::Join));
    }
    for id in &clients {
        sim.with_actor(*id, |p, ctx| match p {
            Participant::Client(c) => c.schedule(ctx),
            Participant::Node(_) => unreachable!(),
        });
    }
    for f in &resolved.faults {
        sim.net.schedule_fault(FaultSpec {
            target: initial[f.node],
            kind: f.kind,
            at: f.at,
        });
    }

    let mut error = None;
    let mut probes = Vec::new();
    let mut ring_at_probe = 0;
    if let Some(p) = &sc.probes {
        if let Err(e) = sim.run_until(p.at) {
            error = Some(e);
        } else {
            let live = live_ring(&sim, &nodes);
            ring_at_probe = live.len();
            let mut rng = ChaCha8Rng::seed_from_u64(sc.seed ^ 0x7072_6f62);
            let entries: Vec<NodeAddress> = (0..p.entries)
                .map(|i| live[i * live.len() / p.entries])
                .collect();
            for entry in entries {
                for _ in 0..p.per_entry {
                    let target = Key(rng.gen_range(0..ks.size()));
                    let expected = oracle_owner(&ks, &live, target).expect("ring is not empty");
                    probes.push(ProbeRecord {
                        entry: entry.id,
                        target,
                        expected,
                    });
                    sim.with_actor(entry.id, |a, ctx| {
                        a.as_node_mut().expect("ring node").probe(ctx, target)
                    });
                }
            }
        }
    }
    if error.is_none() {
        error = sim.run_until(sc.stop_at).err();
    }
    World {
        resolved,
        sim,
        nodes,
        clients,
        probes,
        ring_at_probe,
        error,
    }
}

/// Peer sets of workload uids with more than `f` faulty replica positions.
/// A misrouting node also takes down its successor, whose range can only be
/// reached through it.
fn fault_model(world: &World<'_>) -> FaultModel {
    let res = world.resolved;
    let ks = res.ks;
    let n = res.keys.len();
    let mut faulty: BTreeSet<usize> = BTreeSet::new();
    for f in &res.faults {
        faulty.insert(f.node);
        if f.kind == FaultKind::Misroute {
            faulty.insert((f.node + 1) % n);
        }
    }
    let initial: Vec<NodeAddress> = world.nodes[..n]
        .iter()
        .map(|id| world.node(*id).address())
        .collect();
    let uids: BTreeSet<Key> = res.clients.values().flatten().map(|o| o.op.key()).collect();
    let mut affected = 0;
    for uid in uids {
        let bad = (0..res.r)
            .filter_map(|i| oracle_owner(&ks, &initial, ks.replica_key(uid, i, res.r)))
            .filter(|a| faulty.contains(&(a.id.0 as usize)))
            .count();
        if bad > res.scenario.f {
            affected += 1;
        }
    }
    FaultModel {
        exceeded: affected > 0,
        affected_uids: affected,
    }
}

fn build_report(world: &World<'_>, replay: Option<String>) -> RunReport {
    let res = world.resolved;
    let net = &world.sim.net;
    let verdicts = oracles::evaluate(world, replay.as_deref());

    let mut ops = Vec::new();
    let mut scripted = 0;
    for id in &world.clients {
        let c = world.client(*id);
        scripted += c.script().len();
        ops.extend(c.outcomes().iter().cloned());
    }
    ops.sort_by_key(|o| (o.end, o.client, o.seq));

    let mut lookups = LookupStats::default();
    let mut total_hops = 0;
    for (p, out) in world.probe_results() {
        lookups.probes += 1;
        match out {
            Some(o) => {
                *lookups.histogram.entry(o.hops()).or_default() += 1;
                total_hops += o.hops();
                if o.result.as_ref().is_ok_and(|a| *a == p.expected) {
                    lookups.agreed += 1;
                }
                if o.result.is_err() {
                    lookups.failed += 1;
                }
            }
            None => lookups.failed += 1,
        }
    }
    if lookups.probes > 0 {
        lookups.mean_hops = total_hops as f64 / lookups.probes as f64;
    }
    let mut client_hops = BTreeMap::new();
    for o in &ops {
        *client_hops.entry(o.hops).or_default() += 1;
    }

    let mut recovery = Vec::new();
    let mut nodes = Vec::new();
    for id in &world.nodes {
        let node = world.node(*id);
        recovery.extend(node.recovery.reports().map(|t| RecoverySummary {
            node: id.0,
            task: t.clone(),
        }));
        let fault = if net.is_crashed(*id) {
            Some("crash")
        } else {
            net.byzantine_kind(*id).map(|k| match k {
                crate::simnet::ByzantineKind::WrongValue => "byzantine-wrong-value",
                crate::simnet::ByzantineKind::Silent => "byzantine-silent",
                crate::simnet::ByzantineKind::Misroute => "byzantine-misroute",
            })
        };
        nodes.push(NodeSummary {
            id: id.0,
            key: node.address().key,
            fault,
            joined: node.overlay.is_joined(),
            entries: node.replica.store().len(),
            decisions: node.replica.decisions().len(),
            store_digest: node.replica.store().digest(),
        });
    }

    let passed = world.error.is_none() && verdicts.iter().all(|v| v.as_expected);
    RunReport {
        scenario: res.scenario.name.clone(),
        seed: res.scenario.seed,
        digest: net.trace().digest(),
        trace_records: net.trace().total(),
        ended_at: world.sim.now(),
        sim_error: world.error.as_ref().map(ToString::to_string),
        fault_model: fault_model(world),
        passed,
        verdicts,
        unfinished_ops: scripted - ops.len(),
        ops,
        lookups,
        client_hops,
        messages: net
            .sent_counts()
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        recovery,
        nodes,
    }
}
