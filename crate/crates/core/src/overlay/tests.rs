use super::*;
use crate::simnet::{Actor, DelayModel, FaultKind, NetConfig, Sim};

struct RingNode {
    ov: Overlay,
    found: Vec<LookupOutcome<u64>>,
}

impl Actor for RingNode {
    type Msg = Msg;
    type Timer = Timer;

    fn on_message(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, from: ActorId, msg: Msg) {
        self.ov.on_message(ctx, from, &msg);
        self.drain();
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_, Msg, Timer>, timer: Timer) {
        self.ov.on_timer(ctx, &timer);
        self.drain();
    }
}

impl RingNode {
    fn drain(&mut self) {
        for e in self.ov.take_events() {
            if let OverlayEvent::Lookup(out) = e {
                self.found.push(out);
            }
        }
    }
}

fn addr(i: usize, key: u64) -> NodeAddress {
    NodeAddress {
        id: ActorId(i as u32),
        key: Key(key),
    }
}

fn net(seed: u64) -> NetConfig {
    NetConfig {
        seed,
        delay: DelayModel::Uniform { min: 1, max: 4 },
        keep_ring_records: true,
        ..NetConfig::default()
    }
}

/// A settled ring; maintenance runs only if `config.stabilize_every > 0`.
fn ring(
    bits: u32,
    keys: &[u64],
    config: OverlayConfig,
    seed: u64,
) -> (Sim<RingNode>, Vec<NodeAddress>) {
    let ks = KeySpace::new(bits).unwrap();
    let nodes: Vec<NodeAddress> = keys.iter().enumerate().map(|(i, &k)| addr(i, k)).collect();
    let states = settled(&ks, &nodes, config.successors);
    let mut sim = Sim::new(net(seed));
    for n in &nodes {
        let st = states.iter().find(|s| s.me == *n).unwrap().clone();
        sim.add(RingNode {
            ov: Overlay::new(ks, config, st),
            found: Vec::new(),
        });
    }
    for n in &nodes {
        sim.with_actor(n.id, |a, ctx| {
            let phase = a.ov.random_phase(ctx);
            a.ov.start_maintenance(ctx, phase);
        });
    }
    (sim, nodes)
}

fn quiet() -> OverlayConfig {
    OverlayConfig {
        stabilize_every: 0,
        ..OverlayConfig::default()
    }
}

fn lookup(sim: &mut Sim<RingNode>, entry: ActorId, k: u64) -> LookupOutcome<u64> {
    let before = sim.actor(entry).found.len();
    sim.with_actor(entry, |a, ctx| {
        a.ov.lookup(ctx, Key(k), k, false);
        a.drain();
    });
    let limit = sim.now() + 10_000;
    while sim.actor(entry).found.len() == before && sim.now() < limit {
        if !sim.step().unwrap() {
            break;
        }
    }
    sim.actor(entry).found[before].clone()
}

#[test]
fn lookups_match_oracle_on_small_ring() {
    let keys = [1, 4, 6, 9, 12, 15];
    let (mut sim, nodes) = ring(4, &keys, quiet(), 1);
    let ks = KeySpace::new(4).unwrap();
    for e in &nodes {
        for k in 0..16 {
            let out = lookup(&mut sim, e.id, k);
            let expect = oracle_owner(&ks, &nodes, Key(k)).unwrap();
            assert_eq!(out.result, Ok(expect), "entry {} key {k}", e.key);
        }
    }
    assert_eq!(lookup(&mut sim, nodes[0].id, 5).result.unwrap().key, Key(6));
    assert_eq!(lookup(&mut sim, nodes[3].id, 0).result.unwrap().key, Key(1));
}

#[test]
fn single_node_ring_owns_everything() {
    let (mut sim, nodes) = ring(6, &[17], quiet(), 2);
    for k in [0, 17, 18, 63] {
        assert_eq!(lookup(&mut sim, nodes[0].id, k).result, Ok(nodes[0]));
    }
}

#[test]
fn lookups_end_at_owner_predecessor_without_overshoot() {
    let keys: Vec<u64> = (0..32).map(|i| i * 7 + 3).collect();
    let (mut sim, nodes) = ring(8, &keys, quiet(), 3);
    let ks = KeySpace::new(8).unwrap();
    for k in (0..256).step_by(5) {
        let entry = nodes[(k as usize) % nodes.len()];
        let out = lookup(&mut sim, entry.id, k);
        let owner = oracle_owner(&ks, &nodes, Key(k)).unwrap();
        assert_eq!(out.result, Ok(owner));
        for hop in &out.path {
            assert!(
                ks.between_open(entry.key, Key(k), hop.key),
                "hop {} overshoots {k}",
                hop.key
            );
        }
    }
}

#[test]
fn settled_ring_is_a_fixed_point_of_stabilization() {
    let keys = [3, 40, 77, 120, 200, 250];
    let (mut sim, nodes) = ring(8, &keys, OverlayConfig::default(), 4);
    let before: Vec<RoutingState> = nodes
        .iter()
        .map(|n| sim.actor(n.id).ov.state().clone())
        .collect();
    sim.run_until(500).unwrap();
    for (n, b) in nodes.iter().zip(before) {
        assert_eq!(sim.actor(n.id).ov.state(), &b);
        assert!(sim.actor(n.id).ov.change_log().is_empty());
    }
}

fn converged(sim: &Sim<RingNode>, live: &[NodeAddress], ks: &KeySpace) -> bool {
    let mut sorted = live.to_vec();
    sorted.sort_by_key(|n| n.key);
    let x = sorted.len();
    (0..x).all(|i| {
        let st = sim.actor(sorted[i].id).ov.state();
        let succ_ok = st.successor().id == sorted[(i + 1) % x].id;
        let pred_ok = st.pred.map(|p| p.id) == Some(sorted[(i + x - 1) % x].id);
        let range_ok =
            st.responsibility() == Some(KeyRange::new(sorted[(i + x - 1) % x].key, sorted[i].key));
        succ_ok && pred_ok && range_ok && ks.bits() > 0
    })
}

#[test]
fn join_splits_successor_range() {
    let ks = KeySpace::new(4).unwrap();
    let (mut sim, nodes) = ring(4, &[1, 4, 9], OverlayConfig::default(), 5);
    let newcomer = addr(3, 7);
    let id = sim.add(RingNode {
        ov: Overlay::new(
            ks,
            OverlayConfig::default(),
            RoutingState::detached(newcomer, 4),
        ),
        found: Vec::new(),
    });
    assert_eq!(id, newcomer.id);
    sim.with_actor(id, |a, ctx| {
        a.ov.join(ctx, nodes[0]);
        a.ov.start_maintenance(ctx, 3);
    });
    sim.run_until(400).unwrap();
    let mut live = nodes.clone();
    live.push(newcomer);
    assert!(converged(&sim, &live, &ks));
    let expect = KeyRange::new(Key(4), Key(7));
    let releases: Vec<_> = sim
        .actor(nodes[2].id)
        .ov
        .change_log()
        .iter()
        .map(|(_, c)| *c)
        .collect();
    assert_eq!(releases, vec![KeyspaceChange::Release(expect)]);
    let takes: Vec<_> = sim
        .actor(id)
        .ov
        .change_log()
        .iter()
        .map(|(_, c)| *c)
        .collect();
    assert_eq!(takes, vec![KeyspaceChange::TakeOver(expect)]);
    for k in 0..16 {
        let out = lookup(&mut sim, nodes[1].id, k);
        assert_eq!(out.result, Ok(oracle_owner(&ks, &live, Key(k)).unwrap()));
    }
}

#[test]
fn concurrent_adjacent_joins_partition_correctly() {
    let ks = KeySpace::new(8).unwrap();
    let (mut sim, nodes) = ring(8, &[10, 100, 200], OverlayConfig::default(), 6);
    let mut live = nodes.clone();
    for (i, k) in [(3, 150), (4, 151)] {
        let a = addr(i, k);
        sim.add(RingNode {
            ov: Overlay::new(ks, OverlayConfig::default(), RoutingState::detached(a, 8)),
            found: Vec::new(),
        });
        sim.with_actor(a.id, |n, ctx| {
            n.ov.join(ctx, nodes[0]);
            n.ov.start_maintenance(ctx, 2);
        });
        live.push(a);
    }
    sim.run_until(1_000).unwrap();
    assert!(converged(&sim, &live, &ks));
}

#[test]
fn predecessor_failure_grows_range() {
    let ks = KeySpace::new(4).unwrap();
    let keys = [1, 4, 6, 9, 12, 15];
    let (mut sim, nodes) = ring(4, &keys, OverlayConfig::default(), 7);
    sim.run_until(20).unwrap();
    sim.net.apply_fault(nodes[3], FaultKind::Crash);
    sim.run_until(600).unwrap();
    let live: Vec<NodeAddress> = nodes.iter().copied().filter(|n| n.key != Key(9)).collect();
    assert!(converged(&sim, &live, &ks));
    let twelve = sim.actor(nodes[4].id).ov.change_log();
    assert_eq!(
        twelve.iter().map(|(_, c)| *c).collect::<Vec<_>>(),
        vec![KeyspaceChange::TakeOver(KeyRange::new(Key(6), Key(9)))]
    );
}

#[test]
fn successor_list_survives_consecutive_crashes() {
    let ks = KeySpace::new(8).unwrap();
    let keys: Vec<u64> = (0..12).map(|i| i * 20 + 5).collect();
    let config = OverlayConfig {
        successors: 4,
        ..OverlayConfig::default()
    };
    let (mut sim, nodes) = ring(8, &keys, config, 8);
    sim.run_until(20).unwrap();
    // s - 1 consecutive successors of node 0 crash together.
    for n in &nodes[1..4] {
        sim.net.apply_fault(*n, FaultKind::Crash);
    }
    sim.run_until(1_500).unwrap();
    let live: Vec<NodeAddress> = nodes
        .iter()
        .copied()
        .filter(|n| !(1..4).contains(&(n.id.0 as usize)))
        .collect();
    assert!(converged(&sim, &live, &ks));
    for k in (0..256).step_by(7) {
        let out = lookup(&mut sim, nodes[0].id, k);
        assert_eq!(out.result, Ok(oracle_owner(&ks, &live, Key(k)).unwrap()));
    }
}

#[test]
fn crashed_successor_is_replaced_by_next_in_list() {
    let keys = [10, 60, 110, 160, 210];
    let (mut sim, nodes) = ring(8, &keys, OverlayConfig::default(), 9);
    sim.run_until(15).unwrap();
    sim.net.apply_fault(nodes[1], FaultKind::Crash);
    sim.run_until(300).unwrap();
    assert_eq!(sim.actor(nodes[0].id).ov.state().successor(), nodes[2]);
}

#[test]
fn lookup_routes_around_dead_finger() {
    let ks = KeySpace::new(8).unwrap();
    let keys: Vec<u64> = (0..16).map(|i| i * 16).collect();
    let (mut sim, nodes) = ring(8, &keys, quiet(), 10);
    sim.net.apply_fault(nodes[8], FaultKind::Crash);
    let live: Vec<NodeAddress> = nodes
        .iter()
        .copied()
        .filter(|n| n.id != nodes[8].id)
        .collect();
    let out = lookup(&mut sim, nodes[0].id, 200);
    assert_eq!(out.result, Ok(oracle_owner(&ks, &live, Key(200)).unwrap()));
    assert!(out.suspects.iter().any(|s| s.id == nodes[8].id));
}
